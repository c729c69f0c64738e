use std::collections::{BTreeSet, HashMap};

use crate::dialogue::{Dialogue, TokenKind, TokenIndexMap};

pub const UNK: usize = 0;
pub const CLS: usize = 1;
/// Speaker marker for speakers never seen in training.
pub const UNK_SPEAKER: usize = 2;

const RESERVED: [&str; 3] = ["[UNK]", "[CLS]", "[SPK?]"];

/// Token and speaker vocabulary, sorted for determinism.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

fn speaker_entry(s: &str) -> String {
    format!("[SPK:{s}]")
}

impl Vocab {
    pub fn build<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue>) -> Self {
        let mut words = BTreeSet::new();
        let mut speakers = BTreeSet::new();
        for d in dialogues {
            for u in d.utterances() {
                speakers.insert(speaker_entry(&u.speaker));
                words.extend(u.tokens.iter().cloned());
            }
        }
        let entries = RESERVED.iter().map(|s| s.to_string()).chain(speakers).chain(words).collect();
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<String>) -> Self {
        let index = entries.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Vocab { entries, index }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn word(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or(UNK)
    }

    pub fn speaker(&self, s: &str) -> usize {
        self.index.get(&speaker_entry(s)).copied().unwrap_or(UNK_SPEAKER)
    }

    pub fn entry(&self, id: usize) -> &str {
        &self.entries[id]
    }

    /// Ids of every flattened token of `d`.
    pub fn encode(&self, d: &Dialogue, map: &TokenIndexMap) -> Vec<usize> {
        let offsets = d.content_offsets();
        map.tokens()
            .iter()
            .map(|t| match t.kind {
                TokenKind::Cls => CLS,
                TokenKind::Speaker => self.speaker(d.speaker(t.utterance)),
                TokenKind::Content(c) => self.word(&d.utterance(t.utterance).tokens[c - offsets[t.utterance - 1]]),
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.entries).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let entries: Vec<String> = serde_json::from_str(text)?;
        Ok(Self::from_entries(entries))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{build_token_index, decompose_threads, TokenLayout, Utterance};

    fn dialogue() -> Dialogue {
        let u = |id, speaker: &str, reply_to, tokens: &[&str]| Utterance {
            id,
            speaker: speaker.into(),
            reply_to,
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
        };
        Dialogue::new("d", vec![u(1, "A", None, &["x", "y"]), u(2, "B", Some(1), &["y", "z"])]).unwrap()
    }

    #[test]
    fn encoding_uses_reserved_and_speaker_entries() {
        let d = dialogue();
        let v = Vocab::build([&d]);
        assert_eq!(v.len(), 3 + 2 + 3);
        let map = build_token_index(&d, &decompose_threads(&d), TokenLayout::Wrapped);
        let ids = v.encode(&d, &map);
        assert_eq!(ids.len(), 8);
        assert_eq!(ids[0], CLS);
        assert_eq!(v.entry(ids[3]), "[SPK:A]");
        assert_eq!(v.entry(ids[2]), "y");
        assert_eq!(ids[2], ids[5]);
        assert_eq!(v.word("never"), UNK);
        assert_eq!(v.speaker("Z"), UNK_SPEAKER);
    }

    #[test]
    fn json_round_trip_restores_lookup() {
        let v = Vocab::build([&dialogue()]);
        let back = Vocab::from_json(&v.to_json()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.word("z"), v.word("z"));
    }
}
