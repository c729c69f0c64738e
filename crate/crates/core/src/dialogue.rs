//! Threaded dialogues: ingestion, validation, thread decomposition and the
//! dual-scale (token / utterance) position coordinates.
//!
//! Utterance ids are 1-based; `u_1` is always the root. Files use 0-based
//! reply indices with `-1` marking the root.

use std::collections::BTreeSet;
use std::fmt;

use serde_json::{json, Value};
use thiserror::Error;

use crate::grid::{Quadruple, Sentiment};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DialogueError {
    #[error("parse error at `{path}`: {msg}")]
    Parse { path: String, msg: String },
    #[error("structure error at utterance {utterance}: {msg}")]
    Structure { utterance: usize, msg: String },
    #[error("span error in quadruple {index}: {msg}")]
    Span { index: usize, msg: String },
}

fn parse_err(path: impl Into<String>, msg: impl Into<String>) -> DialogueError {
    DialogueError::Parse { path: path.into(), msg: msg.into() }
}

fn structure_err(utterance: usize, msg: impl Into<String>) -> DialogueError {
    DialogueError::Structure { utterance, msg: msg.into() }
}

/// Inclusive `[start, end]` range of flattened content-token indices
/// (wrapper tokens are not counted).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    /// Reserved placeholder for an element missing from a source annotation.
    pub const NULL: Span = Span { start: usize::MAX, end: usize::MAX };

    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn is_null(&self) -> bool {
        *self == Span::NULL
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            write!(f, "[null]")
        } else {
            write!(f, "[{},{}]", self.start, self.end)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    /// 1-based position in the dialogue.
    pub id: usize,
    pub speaker: String,
    /// `None` only for the root.
    pub reply_to: Option<usize>,
    pub tokens: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub doc_id: String,
    utterances: Vec<Utterance>,
}

impl Dialogue {
    /// Builds a dialogue and checks the reply-tree invariants.
    pub fn new(doc_id: impl Into<String>, utterances: Vec<Utterance>) -> Result<Self, DialogueError> {
        let d = Dialogue { doc_id: doc_id.into(), utterances };
        d.validate()?;
        Ok(d)
    }

    /// Convenience constructor: `speakers[i]`, `replies[i]` (1-based parent or
    /// `None`) and `tokens[i]` describe utterance `i + 1`.
    pub fn from_parts(
        doc_id: impl Into<String>,
        speakers: &[&str],
        replies: &[Option<usize>],
        tokens: &[Vec<&str>],
    ) -> Result<Self, DialogueError> {
        if speakers.len() != replies.len() || speakers.len() != tokens.len() {
            return Err(parse_err("sentences", "speaker/reply/token lists differ in length"));
        }
        let utterances = speakers
            .iter()
            .zip(replies)
            .zip(tokens)
            .enumerate()
            .map(|(i, ((s, r), t))| Utterance {
                id: i + 1,
                speaker: s.to_string(),
                reply_to: *r,
                tokens: t.iter().map(|w| w.to_string()).collect(),
            })
            .collect();
        Dialogue::new(doc_id, utterances)
    }

    fn validate(&self) -> Result<(), DialogueError> {
        if self.utterances.is_empty() {
            return Err(structure_err(0, "dialogue has no utterances"));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            let id = i + 1;
            if u.id != id {
                return Err(structure_err(id, format!("id {} out of sequence", u.id)));
            }
            if u.tokens.is_empty() {
                return Err(structure_err(id, "utterance has no tokens"));
            }
            match (id, u.reply_to) {
                (1, None) => {}
                (1, Some(_)) => return Err(structure_err(1, "root utterance must not reply")),
                (_, None) => return Err(structure_err(id, "second root (missing reply index)")),
                (_, Some(0)) => return Err(structure_err(id, "reply index 0 is not an utterance")),
                (_, Some(l)) if l == id => return Err(structure_err(id, "self reply")),
                (_, Some(l)) if l > id => {
                    return Err(structure_err(id, format!("forward reply to {l}")))
                }
                _ => {}
            }
        }
        // Strictly backward replies make every parent chain terminate at u_1.
        Ok(())
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Utterance by 1-based id.
    pub fn utterance(&self, id: usize) -> &Utterance {
        &self.utterances[id - 1]
    }

    pub fn speaker(&self, id: usize) -> &str {
        &self.utterances[id - 1].speaker
    }

    pub fn parent(&self, id: usize) -> Option<usize> {
        self.utterances[id - 1].reply_to
    }

    /// Number of reply edges.
    pub fn edge_count(&self) -> usize {
        self.utterances.len() - 1
    }

    pub fn children(&self, id: usize) -> Vec<usize> {
        self.utterances
            .iter()
            .filter(|u| u.reply_to == Some(id))
            .map(|u| u.id)
            .collect()
    }

    /// Reply-path depth (root = 0).
    pub fn depth(&self, id: usize) -> usize {
        let mut depth = 0;
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            depth += 1;
            cur = p;
        }
        depth
    }

    pub fn content_token_count(&self) -> usize {
        self.utterances.iter().map(|u| u.tokens.len()).sum()
    }

    /// Flattened content index of the first token of each utterance.
    pub fn content_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.len());
        let mut acc = 0;
        for u in &self.utterances {
            offsets.push(acc);
            acc += u.tokens.len();
        }
        offsets
    }

    /// Utterance id containing a flattened content index.
    pub fn utterance_of_content(&self, index: usize) -> Option<usize> {
        let mut acc = 0;
        for u in &self.utterances {
            if index < acc + u.tokens.len() {
                return Some(u.id);
            }
            acc += u.tokens.len();
        }
        None
    }

    pub fn content_token(&self, index: usize) -> Option<&str> {
        let u = self.utterance_of_content(index)?;
        let off = self.content_offsets()[u - 1];
        Some(self.utterance(u).tokens[index - off].as_str())
    }

    /// Rejects spans that are out of range, reversed, or cross an utterance
    /// boundary. Null spans pass.
    pub fn check_span(&self, span: Span) -> Result<(), String> {
        if span.is_null() {
            return Ok(());
        }
        if span.start > span.end {
            return Err(format!("reversed span {span}"));
        }
        let n = self.content_token_count();
        if span.end >= n {
            return Err(format!("span {span} exceeds {n} tokens"));
        }
        if self.utterance_of_content(span.start) != self.utterance_of_content(span.end) {
            return Err(format!("span {span} crosses an utterance boundary"));
        }
        Ok(())
    }
}

/// How source quadruples with a missing target/aspect/opinion are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NullPolicy {
    /// Drop them (counted in [`Record::dropped_quads`]).
    #[default]
    Reject,
    /// Keep them with [`Span::NULL`] in the missing slots.
    Permissive,
}

/// One parsed input record.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dialogue: Dialogue,
    pub quads: Vec<Quadruple>,
    pub dropped_quads: usize,
}

impl Record {
    /// Serializes back into the file schema (0-based reply indices).
    pub fn to_json(&self) -> Value {
        let sentences: Vec<Value> = self
            .dialogue
            .utterances()
            .iter()
            .map(|u| {
                let reply = u.reply_to.map(|r| r as i64 - 1).unwrap_or(-1);
                json!({ "speaker": u.speaker, "tokens": u.tokens, "reply": reply })
            })
            .collect();
        json!({
            "doc_id": self.dialogue.doc_id,
            "sentences": sentences,
            "quadruples": quads_to_json(&self.quads),
        })
    }
}

pub fn quads_to_json(quads: &[Quadruple]) -> Value {
    let span = |s: Span| if s.is_null() { Value::Null } else { json!([s.start, s.end]) };
    Value::Array(
        quads
            .iter()
            .map(|q| {
                json!({
                    "target": span(q.target),
                    "aspect": span(q.aspect),
                    "opinion": span(q.opinion),
                    "sentiment": q.sentiment.as_str(),
                })
            })
            .collect(),
    )
}

fn get<'a>(obj: &'a Value, key: &str, path: &str) -> Result<&'a Value, DialogueError> {
    obj.get(key).ok_or_else(|| parse_err(format!("{path}.{key}"), "missing field"))
}

fn as_usize(v: &Value, path: &str) -> Result<usize, DialogueError> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| parse_err(path, format!("expected non-negative integer, got {v}")))
}

fn parse_span(v: &Value, path: &str) -> Result<Option<Span>, DialogueError> {
    if v.is_null() {
        return Ok(None);
    }
    let arr = v.as_array().ok_or_else(|| parse_err(path, "expected [start, end] or null"))?;
    if arr.len() != 2 {
        return Err(parse_err(path, format!("expected 2 indices, got {}", arr.len())));
    }
    let s = as_usize(&arr[0], &format!("{path}[0]"))?;
    let e = as_usize(&arr[1], &format!("{path}[1]"))?;
    Ok(Some(Span::new(s, e)))
}

/// Parses one JSON record. Reply indices in the file are 0-based with `-1`
/// for the root; spans are inclusive 0-based content-token indices.
pub fn parse_dialogue(raw: &str, policy: NullPolicy) -> Result<Record, DialogueError> {
    let v: Value = serde_json::from_str(raw).map_err(|e| parse_err("$", e.to_string()))?;
    parse_value(&v, policy)
}

pub fn parse_value(v: &Value, policy: NullPolicy) -> Result<Record, DialogueError> {
    if !v.is_object() {
        return Err(parse_err("$", "record must be an object"));
    }
    let doc_id = get(v, "doc_id", "$")?
        .as_str()
        .ok_or_else(|| parse_err("$.doc_id", "expected string"))?
        .to_string();
    let sentences = get(v, "sentences", "$")?
        .as_array()
        .ok_or_else(|| parse_err("$.sentences", "expected array"))?;
    let mut utterances = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let path = format!("$.sentences[{i}]");
        let speaker = match get(s, "speaker", &path)? {
            Value::String(x) => x.clone(),
            Value::Number(n) => n.to_string(),
            _ => return Err(parse_err(format!("{path}.speaker"), "expected string")),
        };
        let tokens = get(s, "tokens", &path)?
            .as_array()
            .ok_or_else(|| parse_err(format!("{path}.tokens"), "expected array"))?
            .iter()
            .enumerate()
            .map(|(k, t)| {
                t.as_str()
                    .map(str::to_string)
                    .ok_or_else(|| parse_err(format!("{path}.tokens[{k}]"), "expected string"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let reply = get(s, "reply", &path)?
            .as_i64()
            .ok_or_else(|| parse_err(format!("{path}.reply"), "expected integer"))?;
        let reply_to = match reply {
            -1 => None,
            r if r >= 0 => Some(r as usize + 1),
            r => return Err(parse_err(format!("{path}.reply"), format!("invalid reply index {r}"))),
        };
        utterances.push(Utterance { id: i + 1, speaker, reply_to, tokens });
    }
    let dialogue = Dialogue::new(doc_id, utterances)?;

    let mut quads = Vec::new();
    let mut dropped = 0;
    if let Some(qs) = v.get("quadruples").filter(|q| !q.is_null()) {
        let qs = qs.as_array().ok_or_else(|| parse_err("$.quadruples", "expected array"))?;
        for (i, q) in qs.iter().enumerate() {
            let path = format!("$.quadruples[{i}]");
            let t = parse_span(get(q, "target", &path)?, &format!("{path}.target"))?;
            let a = parse_span(get(q, "aspect", &path)?, &format!("{path}.aspect"))?;
            let o = parse_span(get(q, "opinion", &path)?, &format!("{path}.opinion"))?;
            let s = get(q, "sentiment", &path)?
                .as_str()
                .ok_or_else(|| parse_err(format!("{path}.sentiment"), "expected string"))?;
            let sentiment = Sentiment::parse(s)
                .ok_or_else(|| parse_err(format!("{path}.sentiment"), format!("unknown sentiment `{s}`")))?;
            let complete = t.is_some() && a.is_some() && o.is_some();
            if !complete && policy == NullPolicy::Reject {
                dropped += 1;
                continue;
            }
            let quad = Quadruple {
                target: t.unwrap_or(Span::NULL),
                aspect: a.unwrap_or(Span::NULL),
                opinion: o.unwrap_or(Span::NULL),
                sentiment,
            };
            for span in [quad.target, quad.aspect, quad.opinion] {
                dialogue.check_span(span).map_err(|msg| DialogueError::Span { index: i, msg })?;
            }
            quads.push(quad);
        }
    }
    Ok(Record { dialogue, quads, dropped_quads: dropped })
}

/// Which thread an utterance belongs to; the root is shared by all threads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ThreadRef {
    Root,
    Thread(usize),
}

impl ThreadRef {
    /// Same-thread predicate used by the divergent-thread sign inversion.
    pub fn shares_path(self, other: ThreadRef) -> bool {
        match (self, other) {
            (ThreadRef::Root, _) | (_, ThreadRef::Root) => true,
            (a, b) => a == b,
        }
    }
}

/// Root-anchored branches of the reply tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadDecomposition {
    threads: Vec<Vec<usize>>,
    thread_of: Vec<ThreadRef>,
}

impl ThreadDecomposition {
    pub fn threads(&self) -> &[Vec<usize>] {
        &self.threads
    }

    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn thread_of(&self, id: usize) -> ThreadRef {
        self.thread_of[id - 1]
    }

    pub fn utterance_count(&self) -> usize {
        self.thread_of.len()
    }

    /// Start index `S` of a thread when utterances are laid out thread by
    /// thread: the first thread begins at the root itself, later threads at
    /// their first non-root utterance.
    pub fn start_index(&self, thread: usize) -> usize {
        if thread == 0 {
            1
        } else {
            self.threads[thread].get(1).copied().unwrap_or(1)
        }
    }

    /// `S_i` for utterance `id`.
    pub fn start_of(&self, id: usize) -> usize {
        match self.thread_of(id) {
            ThreadRef::Root => 1,
            ThreadRef::Thread(k) => self.start_index(k),
        }
    }

    /// Whether utterance `id` lies on the path set of `thread`.
    pub fn in_thread(&self, id: usize, thread: usize) -> bool {
        match self.thread_of(id) {
            ThreadRef::Root => true,
            ThreadRef::Thread(k) => k == thread,
        }
    }

    /// Rebuilds a decomposition from explicit thread lists, checking the
    /// partition invariants.
    pub fn from_threads(n: usize, threads: Vec<Vec<usize>>) -> Result<Self, DialogueError> {
        let mut thread_of = vec![None; n];
        thread_of[0] = Some(ThreadRef::Root);
        for (k, t) in threads.iter().enumerate() {
            if t.first() != Some(&1) {
                return Err(structure_err(1, format!("thread {k} does not start at the root")));
            }
            if t.windows(2).any(|w| w[0] >= w[1]) {
                return Err(structure_err(t[0], format!("thread {k} is not increasing")));
            }
            for &u in &t[1..] {
                if u == 0 || u > n {
                    return Err(structure_err(u, "thread member out of range"));
                }
                if thread_of[u - 1].is_some() {
                    return Err(structure_err(u, "utterance in more than one thread"));
                }
                thread_of[u - 1] = Some(ThreadRef::Thread(k));
            }
        }
        let thread_of = thread_of
            .into_iter()
            .enumerate()
            .map(|(i, t)| t.ok_or_else(|| structure_err(i + 1, "utterance not in any thread")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ThreadDecomposition { threads, thread_of })
    }
}

/// One thread per child of the root, each holding the root followed by that
/// child's whole subtree in id order.
pub fn decompose_threads(d: &Dialogue) -> ThreadDecomposition {
    let n = d.len();
    let mut thread_of = vec![ThreadRef::Root; n];
    let mut threads: Vec<Vec<usize>> = Vec::new();
    // Parents precede children, so a single forward pass labels every node.
    for id in 2..=n {
        let parent = d.parent(id).expect("non-root utterance has a parent");
        let t = if parent == 1 {
            threads.push(vec![1]);
            threads.len() - 1
        } else {
            match thread_of[parent - 1] {
                ThreadRef::Thread(k) => k,
                ThreadRef::Root => unreachable!("parent {parent} is not the root"),
            }
        };
        thread_of[id - 1] = ThreadRef::Thread(t);
        threads[t].push(id);
    }
    if threads.is_empty() {
        threads.push(vec![1]);
    }
    ThreadDecomposition { threads, thread_of }
}

/// Whether each utterance is wrapped as `[CLS] tokens [SPK]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenLayout {
    Plain,
    #[default]
    Wrapped,
}

impl TokenLayout {
    pub fn utterance_len(self, u: &Utterance) -> usize {
        match self {
            TokenLayout::Plain => u.tokens.len(),
            TokenLayout::Wrapped => u.tokens.len() + 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Cls,
    /// Flattened content index.
    Content(usize),
    Speaker,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenPos {
    pub p_tok: usize,
    pub p_utt: usize,
    pub thread: ThreadRef,
    pub utterance: usize,
    pub offset: usize,
    pub kind: TokenKind,
}

/// Per flattened token coordinates, in dialogue order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIndexMap {
    layout: TokenLayout,
    tokens: Vec<TokenPos>,
    /// First flattened index of each utterance.
    utt_start: Vec<usize>,
    content_to_flat: Vec<usize>,
}

impl TokenIndexMap {
    pub fn layout(&self) -> TokenLayout {
        self.layout
    }

    pub fn tokens(&self) -> &[TokenPos] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, flat: usize) -> &TokenPos {
        &self.tokens[flat]
    }

    /// Flattened index range of utterance `id`.
    pub fn utterance_range(&self, id: usize) -> std::ops::Range<usize> {
        let start = self.utt_start[id - 1];
        let end = self.utt_start.get(id).copied().unwrap_or(self.tokens.len());
        start..end
    }

    pub fn content_len(&self) -> usize {
        self.content_to_flat.len()
    }

    pub fn flat_of_content(&self, content: usize) -> usize {
        self.content_to_flat[content]
    }

    pub fn content_of_flat(&self, flat: usize) -> Option<usize> {
        match self.tokens[flat].kind {
            TokenKind::Content(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_wrapper(&self, flat: usize) -> bool {
        !matches!(self.tokens[flat].kind, TokenKind::Content(_))
    }

    /// Same-thread predicate between two flattened tokens.
    pub fn same_thread(&self, i: usize, j: usize) -> bool {
        self.tokens[i].thread.shares_path(self.tokens[j].thread)
    }
}

/// Assigns `p_tok` (tokens preceding on the root-to-utterance reply path)
/// and `p_utt` (reply depth) to every flattened token.
pub fn build_token_index(d: &Dialogue, td: &ThreadDecomposition, layout: TokenLayout) -> TokenIndexMap {
    let n = d.len();
    let mut first_pos = vec![0usize; n];
    let mut depth = vec![0usize; n];
    for u in d.utterances() {
        if let Some(p) = u.reply_to {
            let parent_len = layout.utterance_len(d.utterance(p));
            first_pos[u.id - 1] = first_pos[p - 1] + parent_len;
            depth[u.id - 1] = depth[p - 1] + 1;
        }
    }
    let mut tokens = Vec::new();
    let mut utt_start = Vec::with_capacity(n);
    let mut content_to_flat = Vec::new();
    let mut content = 0;
    for u in d.utterances() {
        utt_start.push(tokens.len());
        let thread = td.thread_of(u.id);
        let len = layout.utterance_len(u);
        for offset in 0..len {
            let kind = match layout {
                TokenLayout::Plain => TokenKind::Content(content + offset),
                TokenLayout::Wrapped if offset == 0 => TokenKind::Cls,
                TokenLayout::Wrapped if offset == len - 1 => TokenKind::Speaker,
                TokenLayout::Wrapped => TokenKind::Content(content + offset - 1),
            };
            if let TokenKind::Content(_) = kind {
                content_to_flat.push(tokens.len());
            }
            tokens.push(TokenPos {
                p_tok: first_pos[u.id - 1] + offset,
                p_utt: depth[u.id - 1],
                thread,
                utterance: u.id,
                offset,
                kind,
            });
        }
        content += u.tokens.len();
    }
    TokenIndexMap { layout, tokens, utt_start, content_to_flat }
}

/// Set of `(thread, utterance)` memberships, used by invariant checks.
pub fn thread_members(td: &ThreadDecomposition) -> BTreeSet<(usize, usize)> {
    td.threads()
        .iter()
        .enumerate()
        .flat_map(|(k, t)| t.iter().map(move |&u| (k, u)))
        .collect()
}
