//! Grid tagging: label grids from quadruples, rotary-scored grid heads, the
//! weighted loss, decoding back to quadruples and the F1 metrics.
//!
//! Grids are indexed by flattened token (wrapper tokens included, masked).
//! Quadruple spans are content-token indices; a [`TokenIndexMap`] translates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dialogue::{Span, TokenIndexMap};
use crate::drope::{score_matrix, Positions, RopeSettings};
use crate::tensor::{softmax_values, Graph, Group, Linear, ParamId, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Pos,
    Neg,
    Neu,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Pos, Sentiment::Neg, Sentiment::Neu];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pos" | "positive" => Some(Sentiment::Pos),
            "neg" | "negative" => Some(Sentiment::Neg),
            "neu" | "neutral" | "other" => Some(Sentiment::Neu),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Pos => "pos",
            Sentiment::Neg => "neg",
            Sentiment::Neu => "neu",
        }
    }

    /// Class index in the polarity grid.
    pub fn label(self) -> u8 {
        match self {
            Sentiment::Pos => POL_POS,
            Sentiment::Neg => POL_NEG,
            Sentiment::Neu => POL_NEU,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Quadruple {
    pub target: Span,
    pub aspect: Span,
    pub opinion: Span,
    pub sentiment: Sentiment,
}

impl fmt::Display for Quadruple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.target, self.aspect, self.opinion, self.sentiment.as_str())
    }
}

pub const OTHER: u8 = 0;
pub const ENT_TGT: u8 = 1;
pub const ENT_ASP: u8 = 2;
pub const ENT_OPI: u8 = 3;
pub const PAIR_H2H: u8 = 1;
pub const PAIR_T2T: u8 = 2;
pub const POL_POS: u8 = 1;
pub const POL_NEG: u8 = 2;
pub const POL_NEU: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    Ent,
    Pair,
    Pol,
}

impl GridKind {
    pub const ALL: [GridKind; 3] = [GridKind::Ent, GridKind::Pair, GridKind::Pol];

    pub fn classes(self) -> usize {
        match self {
            GridKind::Ent | GridKind::Pol => 4,
            GridKind::Pair => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GridKind::Ent => "ent",
            GridKind::Pair => "pair",
            GridKind::Pol => "pol",
        }
    }

    fn label_name(self, label: u8) -> &'static str {
        match (self, label) {
            (_, OTHER) => "other",
            (GridKind::Ent, ENT_TGT) => "TGT",
            (GridKind::Ent, ENT_ASP) => "ASP",
            (GridKind::Ent, ENT_OPI) => "OPI",
            (GridKind::Pair, PAIR_H2H) => "H2H",
            (GridKind::Pair, PAIR_T2T) => "T2T",
            (GridKind::Pol, POL_POS) => "POS",
            (GridKind::Pol, POL_NEG) => "NEG",
            (GridKind::Pol, POL_NEU) => "NEU",
            _ => "?",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("annotation conflict in {grid} grid at ({row}, {col}): {existing} vs {new}")]
    Conflict { grid: &'static str, row: usize, col: usize, existing: &'static str, new: &'static str },
    #[error("overlapping spans {0} and {1}")]
    Overlap(Span, Span),
    #[error("span {0}: {1}")]
    Span(Span, String),
    #[error("corpus size mismatch: {pred} predicted vs {gold} gold dialogues")]
    Length { pred: usize, gold: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// The three `n × n` label grids plus the cell mask (`false` on any cell
/// touching a wrapper token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrids {
    pub n: usize,
    pub ent: Vec<u8>,
    pub pair: Vec<u8>,
    pub pol: Vec<u8>,
    pub mask: Vec<bool>,
}

impl LabelGrids {
    pub fn empty(map: &TokenIndexMap) -> Self {
        let n = map.len();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                mask[i * n + j] = !map.is_wrapper(i) && !map.is_wrapper(j);
            }
        }
        LabelGrids { n, ent: vec![OTHER; n * n], pair: vec![OTHER; n * n], pol: vec![OTHER; n * n], mask }
    }

    pub fn grid(&self, kind: GridKind) -> &[u8] {
        match kind {
            GridKind::Ent => &self.ent,
            GridKind::Pair => &self.pair,
            GridKind::Pol => &self.pol,
        }
    }

    fn grid_mut(&mut self, kind: GridKind) -> &mut Vec<u8> {
        match kind {
            GridKind::Ent => &mut self.ent,
            GridKind::Pair => &mut self.pair,
            GridKind::Pol => &mut self.pol,
        }
    }

    pub fn at(&self, kind: GridKind, i: usize, j: usize) -> u8 {
        self.grid(kind)[i * self.n + j]
    }

    fn write(&mut self, kind: GridKind, i: usize, j: usize, label: u8) -> Result<(), GridError> {
        let n = self.n;
        let cell = &mut self.grid_mut(kind)[i * n + j];
        if *cell != OTHER && *cell != label {
            return Err(GridError::Conflict {
                grid: kind.as_str(),
                row: i,
                col: j,
                existing: kind.label_name(*cell),
                new: kind.label_name(label),
            });
        }
        *cell = label;
        Ok(())
    }
}

/// Flattened `(head, tail)` of a content span, rejecting cross-utterance spans.
fn flat_span(map: &TokenIndexMap, s: Span) -> Result<(usize, usize), GridError> {
    let content = map.content_len();
    if s.start > s.end || s.end >= content {
        return Err(GridError::Span(s, format!("outside 0..{content}")));
    }
    let (h, t) = (map.flat_of_content(s.start), map.flat_of_content(s.end));
    if map.get(h).utterance != map.get(t).utterance {
        return Err(GridError::Span(s, "crosses an utterance boundary".into()));
    }
    Ok((h, t))
}

fn overlaps(a: Span, b: Span) -> bool {
    a.start <= b.end && b.start <= a.end
}

/// Writes entity, pairing and polarity labels for a quadruple set. Spans of
/// distinct entities must not overlap; missing (null) elements are skipped.
pub fn encode_grids(map: &TokenIndexMap, quads: &[Quadruple]) -> Result<LabelGrids, GridError> {
    let mut grids = LabelGrids::empty(map);
    let mut spans: BTreeMap<Span, u8> = BTreeMap::new();
    for q in quads {
        for (s, role) in [(q.target, ENT_TGT), (q.aspect, ENT_ASP), (q.opinion, ENT_OPI)] {
            if s.is_null() {
                continue;
            }
            let (h, t) = flat_span(map, s)?;
            grids.write(GridKind::Ent, h, t, role)?;
            spans.insert(s, role);
        }
    }
    let all: Vec<Span> = spans.keys().copied().collect();
    for (i, &a) in all.iter().enumerate() {
        if let Some(&b) = all[i + 1..].iter().find(|&&b| overlaps(a, b)) {
            return Err(GridError::Overlap(a, b));
        }
    }
    for q in quads {
        let pairs = [(q.target, q.aspect), (q.target, q.opinion), (q.aspect, q.opinion)];
        for (x, y) in pairs {
            if x.is_null() || y.is_null() {
                continue;
            }
            let (xh, xt) = flat_span(map, x)?;
            let (yh, yt) = flat_span(map, y)?;
            grids.write(GridKind::Pair, xh, yh, PAIR_H2H)?;
            grids.write(GridKind::Pair, yh, xh, PAIR_H2H)?;
            if (xt, yt) != (xh, yh) {
                grids.write(GridKind::Pair, xt, yt, PAIR_T2T)?;
                grids.write(GridKind::Pair, yt, xt, PAIR_T2T)?;
            }
        }
        if !q.target.is_null() && !q.opinion.is_null() {
            let (th, _) = flat_span(map, q.target)?;
            let (oh, _) = flat_span(map, q.opinion)?;
            grids.write(GridKind::Pol, th, oh, q.sentiment.label())?;
        }
    }
    Ok(grids)
}

/// Counts gathered while decoding.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DecodeReport {
    pub spans: usize,
    /// Spans that ended up in no emitted quadruple.
    pub orphan_spans: usize,
    /// Entity cells whose head and tail sit in different utterances.
    pub cross_utterance: usize,
    /// H2H links whose spans were never combined into a quadruple.
    pub unused_links: usize,
}

/// Extracts quadruples from (predicted) grids. A pair of spans is linked
/// when H2H holds at their heads and T2T at their tails (or the tail cell
/// is the head cell); a quadruple needs all three of its pairs linked.
pub fn decode_quadruples(map: &TokenIndexMap, grids: &LabelGrids) -> (Vec<Quadruple>, DecodeReport) {
    let n = grids.n;
    let mut report = DecodeReport::default();
    let mut by_role: [Vec<(Span, usize, usize)>; 3] = Default::default();
    for s in 0..n {
        for e in s..n {
            let cell = s * n + e;
            let label = grids.ent[cell];
            if !grids.mask[cell] || label == OTHER || label > ENT_OPI {
                continue;
            }
            if map.get(s).utterance != map.get(e).utterance {
                report.cross_utterance += 1;
                continue;
            }
            let (Some(cs), Some(ce)) = (map.content_of_flat(s), map.content_of_flat(e)) else { continue };
            by_role[(label - 1) as usize].push((Span::new(cs, ce), s, e));
        }
    }
    report.spans = by_role.iter().map(Vec::len).sum();

    let linked = |a: &(Span, usize, usize), b: &(Span, usize, usize)| -> bool {
        if grids.pair[a.1 * n + b.1] != PAIR_H2H {
            return false;
        }
        (a.2, b.2) == (a.1, b.1) || grids.pair[a.2 * n + b.2] == PAIR_T2T
    };

    let mut used: BTreeSet<(usize, Span)> = BTreeSet::new();
    let mut links_used: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut out = BTreeSet::new();
    let [targets, aspects, opinions] = &by_role;
    for t in targets {
        for a in aspects.iter().filter(|a| linked(t, a)) {
            for o in opinions.iter().filter(|o| linked(t, o) && linked(a, o)) {
                let sentiment = match grids.pol[t.1 * n + o.1] {
                    POL_POS => Sentiment::Pos,
                    POL_NEG => Sentiment::Neg,
                    _ => Sentiment::Neu,
                };
                out.insert(Quadruple { target: t.0, aspect: a.0, opinion: o.0, sentiment });
                used.extend([(0, t.0), (1, a.0), (2, o.0)]);
                links_used.extend([(t.1, a.1), (t.1, o.1), (a.1, o.1)]);
            }
        }
    }
    report.orphan_spans = report.spans - used.len();
    let h2h = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i < j && grids.mask[i * n + j] && grids.pair[i * n + j] == PAIR_H2H)
        .count();
    let used_undirected: BTreeSet<(usize, usize)> = links_used.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
    report.unused_links = h2h.saturating_sub(used_undirected.len());
    (out.into_iter().collect(), report)
}

/// Per-class loss weights for each grid; index 0 is `other`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub ent: Vec<f64>,
    pub pair: Vec<f64>,
    pub pol: Vec<f64>,
}

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights { ent: vec![0.25, 1.0, 1.0, 1.0], pair: vec![0.25, 1.0, 1.0], pol: vec![0.25, 1.0, 1.0, 1.0] }
    }
}

impl ClassWeights {
    pub fn get(&self, kind: GridKind) -> &[f64] {
        match kind {
            GridKind::Ent => &self.ent,
            GridKind::Pair => &self.pair,
            GridKind::Pol => &self.pol,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| x * k).collect();
        ClassWeights { ent: s(&self.ent), pair: s(&self.pair), pol: s(&self.pol) }
    }

    pub fn validate(&self) -> Result<(), String> {
        for kind in GridKind::ALL {
            let w = self.get(kind);
            if w.len() != kind.classes() {
                return Err(format!("{} weights need {} entries, got {}", kind.as_str(), kind.classes(), w.len()));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(format!("{} weights must be finite and non-negative", kind.as_str()));
            }
        }
        Ok(())
    }
}

/// Class-specific query/key projections of one grid class. `aq`/`ak` act on
/// the token stream, `bq`/`bk` on the utterance stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassHead {
    pub aq: ParamId,
    pub ak: ParamId,
    pub bq: ParamId,
    pub bk: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridHead {
    pub kind: GridKind,
    /// Task-specific space `S_g`.
    pub space: Linear,
    pub w_mic: ParamId,
    pub w_mac: ParamId,
    pub classes: Vec<ClassHead>,
}

/// Scoring heads of all three grids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHeads {
    pub grids: Vec<GridHead>,
    pub rope: RopeSettings,
    pub head_width: usize,
}

impl TaskHeads {
    /// `head_width` is the task-space width; each rotary subspace gets half
    /// of it, so it must be a multiple of 4.
    pub fn new(store: &mut ParamStore, d: usize, head_width: usize, rope: RopeSettings) -> Result<Self, GridError> {
        if head_width == 0 || !head_width.is_multiple_of(4) {
            return Err(GridError::Tensor(TensorError::Invalid(format!("head width {head_width} must be a positive multiple of 4"))));
        }
        let half = head_width / 2;
        let mut grids = Vec::new();
        for kind in GridKind::ALL {
            let g = kind.as_str();
            let space = Linear::new(store, &format!("heads.{g}.space"), d, head_width, true, Group::Rest)?;
            let w_mic = store.add_xavier(&format!("heads.{g}.w_mic"), half, half, Group::Rest)?;
            let w_mac = store.add_xavier(&format!("heads.{g}.w_mac"), half, half, Group::Rest)?;
            let mut classes = Vec::new();
            for c in 0..kind.classes() {
                let mut p = |s: &str| store.add_xavier(&format!("heads.{g}.c{c}.{s}"), head_width, half, Group::Rest);
                classes.push(ClassHead { aq: p("aq")?, ak: p("ak")?, bq: p("bq")?, bk: p("bk")? });
            }
            grids.push(GridHead { kind, space, w_mic, w_mac, classes });
        }
        Ok(TaskHeads { grids, rope, head_width })
    }
}

/// Per-grid class logits, each an `n × n` matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLogits {
    pub ent: Vec<Var>,
    pub pair: Vec<Var>,
    pub pol: Vec<Var>,
}

impl GridLogits {
    pub fn get(&self, kind: GridKind) -> &[Var] {
        match kind {
            GridKind::Ent => &self.ent,
            GridKind::Pair => &self.pair,
            GridKind::Pol => &self.pol,
        }
    }
}

/// Class logits for every token pair. `h_tok` is `H_final`, `h_utt` the
/// utterance stream broadcast to tokens; both `n × d`.
pub fn score_grids(
    g: &mut Graph,
    store: &ParamStore,
    heads: &TaskHeads,
    h_tok: Var,
    h_utt: Var,
    pos: &Positions,
) -> Result<GridLogits, GridError> {
    let n = g.value(h_tok).rows();
    if g.value(h_utt).shape() != g.value(h_tok).shape() || pos.len() != n {
        return Err(GridError::Tensor(TensorError::Shape {
            op: "score_grids",
            left: g.value(h_tok).shape().to_vec(),
            right: vec![g.value(h_utt).rows(), pos.len()],
        }));
    }
    let mut out = Vec::new();
    for head in &heads.grids {
        let t = head.space.forward(g, store, h_tok)?;
        let u = head.space.forward(g, store, h_utt)?;
        let w_mic = g.param(store, head.w_mic);
        let w_mac = g.param(store, head.w_mac);
        let mut logits = Vec::with_capacity(head.classes.len());
        for c in &head.classes {
            let proj = |g: &mut Graph, x: Var, a: ParamId, w: Var| -> Result<Var, TensorError> {
                let a = g.param(store, a);
                let s = g.matmul(x, a)?;
                g.matmul(s, w)
            };
            let q_mic = proj(g, t, c.aq, w_mic)?;
            let k_mic = proj(g, t, c.ak, w_mic)?;
            let q_mac = proj(g, u, c.bq, w_mac)?;
            let k_mac = proj(g, u, c.bk, w_mac)?;
            logits.push(score_matrix(g, q_mic, q_mac, k_mic, k_mac, pos, heads.rope)?);
        }
        out.push(logits);
    }
    let pol = out.pop().unwrap_or_default();
    let pair = out.pop().unwrap_or_default();
    let ent = out.pop().unwrap_or_default();
    Ok(GridLogits { ent, pair, pol })
}

/// Cell-wise class probabilities of one grid: `result[c]` is `n × n`.
pub fn grid_probabilities(g: &Graph, logits: &[Var]) -> Result<Vec<Tensor>, TensorError> {
    let first = g.value(logits[0]);
    let cells = first.len();
    let classes = logits.len();
    let mut stacked = vec![0.0; cells * classes];
    for (c, &l) in logits.iter().enumerate() {
        for (cell, v) in g.value(l).data().iter().enumerate() {
            stacked[cell * classes + c] = *v;
        }
    }
    let p = softmax_values(&Tensor::matrix(cells, classes, stacked)?)?;
    (0..classes)
        .map(|c| Tensor::new(first.shape(), (0..cells).map(|cell| p.at(cell, c)).collect()))
        .collect()
}

/// Arg-max labels (ties to the lower class); masked cells stay `other`.
pub fn predict_grids(g: &Graph, logits: &GridLogits, mask: &[bool]) -> LabelGrids {
    let n = g.value(logits.ent[0]).rows();
    let pick = |vars: &[Var]| -> Vec<u8> {
        (0..n * n)
            .map(|cell| {
                if !mask[cell] {
                    return OTHER;
                }
                let mut best = 0;
                for c in 1..vars.len() {
                    if g.value(vars[c]).data()[cell] > g.value(vars[best]).data()[cell] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    };
    LabelGrids { n, ent: pick(&logits.ent), pair: pick(&logits.pair), pol: pick(&logits.pol), mask: mask.to_vec() }
}

/// `−Σ_g Σ_{i,j} α^g_{ij} log P(y^g_{ij})` over unmasked cells, `α` taken
/// from the gold class of each cell.
pub fn weighted_ce_loss(g: &mut Graph, logits: &GridLogits, gold: &LabelGrids, weights: &ClassWeights) -> Result<Var, GridError> {
    let mut total: Option<Var> = None;
    for kind in GridKind::ALL {
        let labels = gold.grid(kind);
        let w = weights.get(kind);
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= kind.classes()) {
            return Err(GridError::Tensor(TensorError::Invalid(format!("gold class {bad} out of range in {} grid", kind.as_str()))));
        }
        if w.len() != kind.classes() {
            return Err(GridError::Tensor(TensorError::Invalid(format!("{} weights need {} entries", kind.as_str(), kind.classes()))));
        }
        let cell_w: Vec<f64> = labels.iter().zip(&gold.mask).map(|(&l, &m)| if m { w[l as usize] } else { 0.0 }).collect();
        let loss = g.cell_cross_entropy(logits.get(kind), Rc::new(labels.to_vec()), Rc::new(cell_w))?;
        total = Some(match total {
            Some(t) => g.add(t, loss)?,
            None => loss,
        });
    }
    Ok(total.expect("three grids"))
}

/// Precision, recall and F1 with counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Prf { precision, recall, f1, correct, predicted, gold }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub target_aspect: Prf,
    pub target_opinion: Prf,
    pub aspect_opinion: Prf,
    pub micro: Prf,
    pub ident: Prf,
}

impl Metrics {
    /// Flat `key value` lines.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (name, p) in [
            ("t_a", self.target_aspect),
            ("t_o", self.target_opinion),
            ("a_o", self.aspect_opinion),
            ("micro", self.micro),
            ("ident", self.ident),
        ] {
            s.push_str(&format!("{name}_precision {:.6}\n{name}_recall {:.6}\n{name}_f1 {:.6}\n", p.precision, p.recall, p.f1));
        }
        s
    }
}

fn prf_over<T: Ord>(pred: &[Vec<Quadruple>], gold: &[Vec<Quadruple>], key: impl Fn(&Quadruple) -> T) -> Prf {
    let (mut c, mut p, mut g) = (0, 0, 0);
    for (pq, gq) in pred.iter().zip(gold) {
        let ps: BTreeSet<T> = pq.iter().map(&key).collect();
        let gs: BTreeSet<T> = gq.iter().map(&key).collect();
        c += ps.intersection(&gs).count();
        p += ps.len();
        g += gs.len();
    }
    Prf::from_counts(c, p, g)
}

/// Corpus-level micro-averaged metrics; `pred[i]` and `gold[i]` belong to
/// the same dialogue.
pub fn evaluate(pred: &[Vec<Quadruple>], gold: &[Vec<Quadruple>]) -> Result<Metrics, GridError> {
    if pred.len() != gold.len() {
        return Err(GridError::Length { pred: pred.len(), gold: gold.len() });
    }
    Ok(Metrics {
        target_aspect: prf_over(pred, gold, |q| (q.target, q.aspect)),
        target_opinion: prf_over(pred, gold, |q| (q.target, q.opinion)),
        aspect_opinion: prf_over(pred, gold, |q| (q.aspect, q.opinion)),
        micro: prf_over(pred, gold, |q| *q),
        ident: prf_over(pred, gold, |q| (q.target, q.aspect, q.opinion)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{build_token_index, decompose_threads, Dialogue, TokenLayout};
    use crate::tensor::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dialogue(lens: &[usize]) -> Dialogue {
        let words = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7", "w8", "w9"];
        let speakers: Vec<&str> = (0..lens.len()).map(|i| ["A", "B"][i % 2]).collect();
        let replies: Vec<Option<usize>> = (0..lens.len()).map(|i| if i == 0 { None } else { Some(1) }).collect();
        let tokens: Vec<Vec<&str>> = lens.iter().map(|&n| words[..n].to_vec()).collect();
        Dialogue::from_parts("g", &speakers, &replies, &tokens).unwrap()
    }

    fn index(d: &Dialogue, layout: TokenLayout) -> TokenIndexMap {
        build_token_index(d, &decompose_threads(d), layout)
    }

    fn q(t: (usize, usize), a: (usize, usize), o: (usize, usize), s: Sentiment) -> Quadruple {
        Quadruple { target: Span::new(t.0, t.1), aspect: Span::new(a.0, a.1), opinion: Span::new(o.0, o.1), sentiment: s }
    }

    #[test]
    fn empty_set_gives_other_everywhere() {
        let map = index(&dialogue(&[4, 3]), TokenLayout::Wrapped);
        let g = encode_grids(&map, &[]).unwrap();
        assert!(g.ent.iter().chain(&g.pair).chain(&g.pol).all(|&l| l == OTHER));
        assert!(decode_quadruples(&map, &g).0.is_empty());
        // Wrapper rows and columns are masked.
        assert!(!g.mask[0] && g.mask[g.n + 1]);
    }

    #[test]
    fn single_token_quadruple_cells() {
        let map = index(&dialogue(&[10]), TokenLayout::Plain);
        let quad = q((2, 2), (5, 5), (8, 8), Sentiment::Neg);
        let g = encode_grids(&map, &[quad]).unwrap();
        assert_eq!(g.at(GridKind::Ent, 2, 2), ENT_TGT);
        assert_eq!(g.at(GridKind::Ent, 5, 5), ENT_ASP);
        assert_eq!(g.at(GridKind::Ent, 8, 8), ENT_OPI);
        for (a, b) in [(2, 5), (2, 8), (5, 8)] {
            assert_eq!(g.at(GridKind::Pair, a, b), PAIR_H2H);
            assert_eq!(g.at(GridKind::Pair, b, a), PAIR_H2H);
        }
        assert_eq!(g.at(GridKind::Pol, 2, 8), POL_NEG);
        assert_eq!(g.pair.iter().filter(|&&l| l == PAIR_T2T).count(), 0);
        assert_eq!(decode_quadruples(&map, &g).0, vec![quad]);
    }

    #[test]
    fn multi_token_heads_and_tails() {
        // "iPhone 14" (0-1) paired with "battery life" (3-4).
        let map = index(&dialogue(&[8]), TokenLayout::Plain);
        let quad = q((0, 1), (3, 4), (6, 6), Sentiment::Pos);
        let g = encode_grids(&map, &[quad]).unwrap();
        assert_eq!(g.at(GridKind::Ent, 0, 1), ENT_TGT);
        assert_eq!(g.at(GridKind::Pair, 0, 3), PAIR_H2H);
        assert_eq!(g.at(GridKind::Pair, 1, 4), PAIR_T2T);
        assert_eq!(g.at(GridKind::Pair, 1, 6), PAIR_T2T);
        assert_eq!(decode_quadruples(&map, &g).0, vec![quad]);
    }

    #[test]
    fn conflicts_are_reported() {
        let map = index(&dialogue(&[10]), TokenLayout::Plain);
        let a = q((0, 0), (2, 2), (4, 4), Sentiment::Pos);
        let b = q((0, 0), (6, 6), (4, 4), Sentiment::Neg);
        assert!(matches!(encode_grids(&map, &[a, b]), Err(GridError::Conflict { grid: "pol", row: 0, col: 4, .. })));
        let c = q((0, 1), (1, 2), (4, 4), Sentiment::Pos);
        assert!(matches!(encode_grids(&map, &[c]), Err(GridError::Overlap(..))));
        let role = q((2, 2), (0, 0), (4, 4), Sentiment::Pos);
        assert!(matches!(encode_grids(&map, &[a, role]), Err(GridError::Conflict { grid: "ent", .. })));
    }

    #[test]
    fn cross_utterance_span_rejected() {
        let map = index(&dialogue(&[3, 3]), TokenLayout::Wrapped);
        let bad = q((2, 3), (0, 0), (5, 5), Sentiment::Pos);
        assert!(matches!(encode_grids(&map, &[bad]), Err(GridError::Span(..))));
    }

    #[test]
    fn orphan_span_is_counted() {
        let map = index(&dialogue(&[5]), TokenLayout::Plain);
        let mut g = LabelGrids::empty(&map);
        g.ent[g.n + 2] = ENT_ASP;
        let (quads, report) = decode_quadruples(&map, &g);
        assert!(quads.is_empty());
        assert_eq!(report.spans, 1);
        assert_eq!(report.orphan_spans, 1);
    }

    #[test]
    fn shared_target_does_not_cross_combine() {
        let map = index(&dialogue(&[10]), TokenLayout::Plain);
        let quads = vec![q((0, 0), (2, 2), (4, 4), Sentiment::Pos), q((0, 0), (6, 6), (8, 9), Sentiment::Neg)];
        let g = encode_grids(&map, &quads).unwrap();
        let (mut out, report) = decode_quadruples(&map, &g);
        out.sort();
        assert_eq!(out, quads);
        assert_eq!(report.orphan_spans, 0);
    }

    #[test]
    fn polarity_defaults_to_neutral() {
        let map = index(&dialogue(&[6]), TokenLayout::Plain);
        let quad = q((0, 0), (2, 2), (4, 4), Sentiment::Pos);
        let mut g = encode_grids(&map, &[quad]).unwrap();
        g.pol[4] = OTHER;
        assert_eq!(decode_quadruples(&map, &g).0[0].sentiment, Sentiment::Neu);
    }

    /// Random non-overlapping quadruple set over a wrapped dialogue.
    fn random_quads(rng: &mut ChaCha8Rng, lens: &[usize], k: usize) -> Vec<Quadruple> {
        let mut offset = 0;
        let mut free: Vec<Span> = Vec::new();
        for &len in lens {
            let mut i = 0;
            while i < len {
                let w = rng.gen_range(1..=2).min(len - i);
                free.push(Span::new(offset + i, offset + i + w - 1));
                i += w + rng.gen_range(0..2);
            }
            offset += len;
        }
        let mut out = Vec::new();
        for _ in 0..k {
            if free.len() < 3 {
                break;
            }
            let mut take = || free.remove(rng.gen_range(0..free.len()));
            let (t, a, o) = (take(), take(), take());
            let s = Sentiment::ALL[rng.gen_range(0..3)];
            out.push(Quadruple { target: t, aspect: a, opinion: o, sentiment: s });
        }
        out.sort();
        out
    }

    proptest! {
        #[test]
        fn round_trip(seed in 0u64..10_000, k in 0usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lens: Vec<usize> = (0..rng.gen_range(1..5)).map(|_| rng.gen_range(1..8)).collect();
            let d = dialogue(&lens);
            let map = index(&d, TokenLayout::Wrapped);
            let quads = random_quads(&mut rng, &lens, k);
            let g = encode_grids(&map, &quads).unwrap();
            prop_assert_eq!(decode_quadruples(&map, &g).0, quads);
        }

        #[test]
        fn masked_cells_stay_other(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lens = [3, 4, 2];
            let map = index(&dialogue(&lens), TokenLayout::Wrapped);
            let g = encode_grids(&map, &random_quads(&mut rng, &lens, 2)).unwrap();
            for (cell, &m) in g.mask.iter().enumerate() {
                if !m {
                    prop_assert!(g.ent[cell] == OTHER && g.pair[cell] == OTHER && g.pol[cell] == OTHER);
                }
            }
        }
    }

    fn const_logits(g: &mut Graph, n: usize, classes: usize, f: impl Fn(usize, usize) -> f64) -> Vec<Var> {
        (0..classes)
            .map(|c| g.constant(Tensor::matrix(n, n, (0..n * n).map(|cell| f(cell, c)).collect()).unwrap()))
            .collect()
    }

    #[test]
    fn loss_examples() {
        let map = index(&dialogue(&[6]), TokenLayout::Plain);
        let gold = encode_grids(&map, &[q((0, 0), (2, 3), (5, 5), Sentiment::Pos)]).unwrap();
        let n = gold.n;
        let ones = ClassWeights { ent: vec![1.0; 4], pair: vec![1.0; 3], pol: vec![1.0; 4] };

        let mut g = Graph::new();
        let perfect = |labels: &[u8]| {
            let labels = labels.to_vec();
            move |cell: usize, c: usize| if labels[cell] as usize == c { 30.0 } else { -30.0 }
        };
        let logits = GridLogits {
            ent: const_logits(&mut g, n, 4, perfect(&gold.ent)),
            pair: const_logits(&mut g, n, 3, perfect(&gold.pair)),
            pol: const_logits(&mut g, n, 4, perfect(&gold.pol)),
        };
        let l = weighted_ce_loss(&mut g, &logits, &gold, &ones).unwrap();
        assert!(g.value(l).item() <= 1e-6);

        let uniform = GridLogits {
            ent: const_logits(&mut g, n, 4, |_, _| 0.0),
            pair: const_logits(&mut g, n, 3, |_, _| 0.0),
            pol: const_logits(&mut g, n, 4, |_, _| 0.0),
        };
        let l = weighted_ce_loss(&mut g, &uniform, &gold, &ones).unwrap();
        let cells = (n * n) as f64;
        let expected = cells * (4f64.ln() + 3f64.ln() + 4f64.ln());
        assert!((g.value(l).item() - expected).abs() < 1e-9);

        let base = weighted_ce_loss(&mut g, &uniform, &gold, &ClassWeights::default()).unwrap();
        let doubled = weighted_ce_loss(&mut g, &uniform, &gold, &ClassWeights::default().scaled(2.0)).unwrap();
        assert_eq!(g.value(doubled).item(), 2.0 * g.value(base).item());

        let mut bad = gold.clone();
        bad.pair[0] = 7;
        assert!(weighted_ce_loss(&mut g, &uniform, &bad, &ones).is_err());
    }

    #[test]
    fn raising_gold_logit_lowers_loss() {
        let map = index(&dialogue(&[4]), TokenLayout::Plain);
        let gold = encode_grids(&map, &[q((0, 0), (1, 1), (3, 3), Sentiment::Neg)]).unwrap();
        let n = gold.n;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base: Vec<f64> = (0..n * n * 11).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss_with = |bump_cell: Option<usize>| {
            let mut g = Graph::new();
            let mut off = 0;
            let mut mk = |g: &mut Graph, classes: usize, labels: &[u8]| {
                let vars = const_logits(g, n, classes, |cell, c| {
                    let v = base[off + c * n * n + cell];
                    if Some(cell) == bump_cell && labels[cell] as usize == c { v + 0.5 } else { v }
                });
                off += classes * n * n;
                vars
            };
            let logits = GridLogits { ent: mk(&mut g, 4, &gold.ent), pair: mk(&mut g, 3, &gold.pair), pol: mk(&mut g, 4, &gold.pol) };
            let l = weighted_ce_loss(&mut g, &logits, &gold, &ClassWeights::default()).unwrap();
            g.value(l).item()
        };
        let l0 = loss_with(None);
        for cell in 0..n * n {
            assert!(loss_with(Some(cell)) < l0);
        }
    }

    #[test]
    fn zero_class_projections_give_uniform() {
        let d = dialogue(&[3, 2]);
        let map = index(&d, TokenLayout::Wrapped);
        let pos = Positions::from_index(&map);
        let mut store = ParamStore::new(1);
        let heads = TaskHeads::new(&mut store, 4, 4, RopeSettings::default()).unwrap();
        for h in &heads.grids {
            for c in &h.classes {
                for id in [c.aq, c.ak, c.bq, c.bk] {
                    store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
                }
            }
        }
        let n = map.len();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let h = g.constant(Tensor::matrix(n, 4, (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let logits = score_grids(&mut g, &store, &heads, h, h, &pos).unwrap();
        for kind in GridKind::ALL {
            let p = grid_probabilities(&g, logits.get(kind)).unwrap();
            for t in &p {
                assert!(t.data().iter().all(|&v| (v - 1.0 / kind.classes() as f64).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn single_token_grid_matches_hand_score() {
        let d = Dialogue::from_parts("one", &["A"], &[None], &[vec!["x"]]).unwrap();
        let map = index(&d, TokenLayout::Plain);
        let pos = Positions::from_index(&map);
        let mut store = ParamStore::new(2);
        let heads = TaskHeads::new(&mut store, 4, 4, RopeSettings::default()).unwrap();
        let h = Tensor::row(&[0.3, -0.7, 1.1, 0.2]);
        let mut g = Graph::new();
        let hv = g.constant(h.clone());
        let logits = score_grids(&mut g, &store, &heads, hv, hv, &pos).unwrap();
        let mut probs_sum = 0.0;
        for head in &heads.grids {
            let w = store.value(head.space.weight);
            let b = store.value(head.space.bias.unwrap());
            let mut t = h.matmul(w).unwrap();
            t.add_assign(&Tensor::row(b.data()));
            for (c, ch) in head.classes.iter().enumerate() {
                let f = |a: ParamId, w: ParamId| t.matmul(store.value(a)).unwrap().matmul(store.value(w)).unwrap();
                // Equal positions: rotations cancel.
                let s = crate::drope::dot(f(ch.aq, head.w_mic).data(), f(ch.ak, head.w_mic).data())
                    + crate::drope::dot(f(ch.bq, head.w_mac).data(), f(ch.bk, head.w_mac).data());
                let got = g.value(logits.get(head.kind)[c]).item();
                assert!((got - s).abs() < 1e-12);
            }
            probs_sum += grid_probabilities(&g, logits.get(head.kind)).unwrap().iter().map(|t| t.item()).sum::<f64>();
        }
        assert!((probs_sum - 3.0).abs() < 1e-9);
    }

    #[test]
    fn head_and_loss_gradients() {
        let d = dialogue(&[2, 1]);
        let map = index(&d, TokenLayout::Wrapped);
        let pos = Positions::from_index(&map);
        let gold = encode_grids(&map, &[q((0, 0), (1, 1), (2, 2), Sentiment::Pos)]).unwrap();
        let mut store = ParamStore::new(3);
        let heads = TaskHeads::new(&mut store, 4, 4, RopeSettings::default()).unwrap();
        let n = map.len();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = Tensor::matrix(n, 4, (0..n * 4).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let u = Tensor::matrix(n, 4, (0..n * 4).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap();
        let report = grad_check(&mut store, |g, s| {
            let hv = g.constant(h.clone());
            let uv = g.constant(u.clone());
            let logits = score_grids(g, s, &heads, hv, uv, &pos).map_err(|e| TensorError::Invalid(e.to_string()))?;
            weighted_ce_loss(g, &logits, &gold, &ClassWeights::default()).map_err(|e| TensorError::Invalid(e.to_string()))
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn metric_examples() {
        let a = q((0, 0), (1, 1), (2, 2), Sentiment::Pos);
        let b = q((3, 3), (4, 4), (5, 5), Sentiment::Neg);
        let c = q((6, 6), (7, 7), (8, 8), Sentiment::Neu);
        let m = evaluate(&[vec![a, b]], &[vec![a, b]]).unwrap();
        assert_eq!(m.micro.f1, 1.0);
        assert_eq!(m.target_aspect.f1, 1.0);
        let m = evaluate(&[vec![]], &[vec![a]]).unwrap();
        assert_eq!((m.micro.precision, m.micro.recall, m.micro.f1), (0.0, 0.0, 0.0));
        let m = evaluate(&[vec![a, c]], &[vec![a, b]]).unwrap();
        assert_eq!((m.micro.precision, m.micro.recall, m.micro.f1), (0.5, 0.5, 0.5));
        let flipped = Quadruple { sentiment: Sentiment::Pos, ..b };
        let m = evaluate(&[vec![a, flipped]], &[vec![a, b]]).unwrap();
        assert_eq!(m.micro.f1, 0.5);
        assert_eq!(m.ident.f1, 1.0);
        assert!(evaluate(&[vec![]], &[]).is_err());
    }

    #[test]
    fn metrics_ignore_dialogue_order() {
        let a = q((0, 0), (1, 1), (2, 2), Sentiment::Pos);
        let b = q((3, 3), (4, 4), (5, 5), Sentiment::Neg);
        let pred = vec![vec![a], vec![b, a]];
        let gold = vec![vec![a, b], vec![b]];
        let m1 = evaluate(&pred, &gold).unwrap();
        let m2 = evaluate(&[pred[1].clone(), pred[0].clone()], &[gold[1].clone(), gold[0].clone()]).unwrap();
        assert_eq!(m1, m2);
    }
}
