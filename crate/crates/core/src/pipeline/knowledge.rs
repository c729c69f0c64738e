//! Thread-level knowledge enhancement, utterance pooling and the
//! token-to-utterance cross-attention.

use std::collections::BTreeMap;
use std::path::Path;
use std::rc::Rc;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::config::hex;
use super::encoder::attention;
use super::PipelineError;
use crate::dialogue::{ThreadDecomposition, TokenIndexMap};
use crate::gnn::{gcn_stack, normalized_adjacency, LN_EPS};
use crate::tensor::{Graph, Group, Linear, ParamId, ParamStore, RowMap, Tensor, TensorError, Var};

/// Neighbours kept per token in the semantic graph.
pub const SEM_NEIGHBORS: usize = 3;

/// Flattened token indices of each thread, root first.
pub fn thread_tokens(td: &ThreadDecomposition, map: &TokenIndexMap) -> Vec<Vec<usize>> {
    td.threads().iter().map(|t| t.iter().flat_map(|&u| map.utterance_range(u)).collect()).collect()
}

/// Parser-free syntactic graph over one thread: neighbouring content tokens
/// of an utterance are linked, and both wrappers link to every content token
/// of their utterance.
pub fn syntactic_adjacency(tokens: &[usize], map: &TokenIndexMap) -> Tensor {
    let n = tokens.len();
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (map.get(tokens[i]), map.get(tokens[j]));
            if i == j || x.utterance != y.utterance {
                continue;
            }
            let (wx, wy) = (map.is_wrapper(tokens[i]), map.is_wrapper(tokens[j]));
            let linked = match (wx, wy) {
                (false, false) => x.offset.abs_diff(y.offset) == 1,
                (true, true) => false,
                _ => true,
            };
            if linked {
                a.set(i, j, 1.0);
            }
        }
    }
    a
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Symmetrized top-`k` cosine graph over the rows of `h`. Ties go to the
/// lower index.
pub fn semantic_adjacency(h: &Tensor, k: usize) -> Tensor {
    let n = h.rows();
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        let mut cand: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (cosine(h.row_slice(i), h.row_slice(j)), j)).collect();
        cand.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for &(_, j) in cand.iter().take(k) {
            a.set(i, j, 1.0);
            a.set(j, i, 1.0);
        }
    }
    a
}

/// `(A_syn, A_sem)` for one thread from its tokens and current features.
pub fn default_adjacency(tokens: &[usize], map: &TokenIndexMap, h: &Tensor) -> (Tensor, Tensor) {
    (syntactic_adjacency(tokens, map), semantic_adjacency(h, SEM_NEIGHBORS))
}

#[derive(Debug, Deserialize)]
struct EdgeLists {
    syn: Vec<[usize; 2]>,
    sem: Vec<[usize; 2]>,
}

/// Adjacency supplied from a file, keyed by document id. Each document lists
/// one `{"syn": [[i, j], ...], "sem": [...]}` entry per thread with
/// thread-local token indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalAdjacency {
    docs: BTreeMap<String, Vec<(Vec<[usize; 2]>, Vec<[usize; 2]>)>>,
    pub checksum: String,
}

impl ExternalAdjacency {
    pub fn parse(bytes: &[u8]) -> Result<Self, PipelineError> {
        let raw: BTreeMap<String, Vec<EdgeLists>> =
            serde_json::from_slice(bytes).map_err(|e| PipelineError::Data(format!("adjacency file: {e}")))?;
        let docs = raw.into_iter().map(|(k, v)| (k, v.into_iter().map(|t| (t.syn, t.sem)).collect())).collect();
        Ok(ExternalAdjacency { docs, checksum: hex(&Sha256::digest(bytes)) })
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let bytes = std::fs::read(path).map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&bytes)
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.docs.contains_key(doc_id)
    }

    /// Dense matrices for every thread of `doc_id`, sized by `lens`.
    pub fn matrices(&self, doc_id: &str, lens: &[usize]) -> Result<Option<Vec<(Tensor, Tensor)>>, PipelineError> {
        let Some(threads) = self.docs.get(doc_id) else { return Ok(None) };
        if threads.len() != lens.len() {
            return Err(PipelineError::Data(format!("{doc_id}: adjacency has {} threads, dialogue has {}", threads.len(), lens.len())));
        }
        let dense = |edges: &[[usize; 2]], n: usize| -> Result<Tensor, PipelineError> {
            let mut a = Tensor::zeros(&[n, n]);
            for &[i, j] in edges {
                if i >= n || j >= n {
                    return Err(PipelineError::Data(format!("{doc_id}: edge ({i}, {j}) outside a {n}-token thread")));
                }
                a.set(i, j, 1.0);
            }
            Ok(a)
        };
        threads.iter().zip(lens).map(|((s, m), &n)| Ok((dense(s, n)?, dense(m, n)?))).collect::<Result<Vec<_>, _>>().map(Some)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CkParams {
    pub syn: Vec<Linear>,
    pub sem: Vec<Linear>,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl CkParams {
    pub fn new(store: &mut ParamStore, width: usize, layers: usize) -> Result<Self, TensorError> {
        let mut stack = |name: &str| -> Result<Vec<Linear>, TensorError> {
            (1..=layers).map(|l| Linear::new(store, &format!("ck.{name}.l{l}"), width, width, true, Group::Rest)).collect()
        };
        let (syn, sem) = (stack("syn")?, stack("sem")?);
        Ok(CkParams {
            syn,
            sem,
            ln_gain: store.add_ones("ck.ln_gain", &[width], Group::Rest)?,
            ln_bias: store.add_zeros("ck.ln_bias", &[width], Group::Rest)?,
        })
    }
}

/// One thread's encoder output and graphs.
pub struct ThreadFeatures<'a> {
    pub tokens: &'a [usize],
    pub h: Var,
    pub a_syn: &'a Tensor,
    pub a_sem: &'a Tensor,
}

/// Output of [`ck_encode`]: the reassembled encoder features `H_tok` and the
/// enhanced `H'_tok`, both `n_tok × d`.
pub struct CkOutput {
    pub h_tok: Var,
    pub enhanced: Var,
}

/// Row map taking concatenated thread rows back to flattened tokens, averaging
/// tokens that occur in several threads (the root).
pub fn reassembly_map(threads: &[&[usize]], n_tok: usize) -> Result<RowMap, TensorError> {
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_tok];
    let mut row = 0;
    for t in threads {
        for &flat in *t {
            groups.get_mut(flat).ok_or_else(|| TensorError::Invalid(format!("token {flat} outside {n_tok}")))?.push(row);
            row += 1;
        }
    }
    if let Some(missing) = groups.iter().position(Vec::is_empty) {
        return Err(TensorError::Invalid(format!("token {missing} is on no thread")));
    }
    Ok(RowMap::mean(row, &groups))
}

pub fn ck_encode(g: &mut Graph, store: &ParamStore, p: &CkParams, threads: &[ThreadFeatures], n_tok: usize) -> Result<CkOutput, TensorError> {
    let mut plain = Vec::with_capacity(threads.len());
    let mut knowledge = Vec::with_capacity(threads.len());
    for t in threads {
        let len = t.tokens.len();
        if t.a_syn.shape() != [len, len] || t.a_sem.shape() != [len, len] || g.value(t.h).rows() != len {
            return Err(TensorError::Shape { op: "ck_encode", left: t.a_syn.shape().to_vec(), right: vec![len, g.value(t.h).rows()] });
        }
        let syn = g.constant(normalized_adjacency(t.a_syn)?);
        let sem = g.constant(normalized_adjacency(t.a_sem)?);
        let hs = gcn_stack(g, store, &p.syn, syn, t.h)?;
        let hm = gcn_stack(g, store, &p.sem, sem, t.h)?;
        plain.push(t.h);
        knowledge.push(g.add(hs, hm)?);
    }
    let lists: Vec<&[usize]> = threads.iter().map(|t| t.tokens).collect();
    let map = Rc::new(reassembly_map(&lists, n_tok)?);
    let h_cat = g.concat_rows(&plain)?;
    let k_cat = g.concat_rows(&knowledge)?;
    let h_tok = g.row_combine(h_cat, map.clone())?;
    let k_tok = g.row_combine(k_cat, map)?;
    let sum = g.add(h_tok, k_tok)?;
    let gain = g.param(store, p.ln_gain);
    let bias = g.param(store, p.ln_bias);
    let enhanced = g.layer_norm(sum, gain, bias, LN_EPS)?;
    Ok(CkOutput { h_tok, enhanced })
}

/// Positions of the `k` highest scores, ties to the lower index, returned in
/// ascending order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// `⌈λ·m⌉`, at least 1.
pub fn keep_count(ratio: f64, m: usize) -> usize {
    ((ratio * m as f64).ceil() as usize).clamp(1, m.max(1))
}

/// Gate-selected mean pooling of each utterance's content tokens;
/// `n_utt × d`. The gate only ranks tokens, so it receives no gradient.
pub fn topk_aggregate(g: &mut Graph, store: &ParamStore, gate: &Linear, h: Var, map: &TokenIndexMap, utterances: usize, ratio: f64) -> Result<Var, TensorError> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(TensorError::Invalid(format!("top-k ratio {ratio} outside (0, 1]")));
    }
    let scores = store.value(gate.weight).clone();
    let bias = gate.bias.map_or(0.0, |b| store.value(b).item());
    let t = g.value(h);
    let mut groups = Vec::with_capacity(utterances);
    for u in 1..=utterances {
        let content: Vec<usize> = map.utterance_range(u).filter(|&f| !map.is_wrapper(f)).collect();
        let s: Vec<f64> = content.iter().map(|&f| t.row_slice(f).iter().zip(scores.data()).map(|(x, w)| x * w).sum::<f64>() + bias).collect();
        let chosen = top_k(&s, keep_count(ratio, content.len()));
        groups.push(chosen.into_iter().map(|i| content[i]).collect());
    }
    let rows = t.rows();
    g.row_combine(h, Rc::new(RowMap::mean(rows, &groups)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl CrossParams {
    pub fn new(store: &mut ParamStore, width: usize) -> Result<Self, TensorError> {
        let mut lin = |s: &str, bias: bool| Linear::new(store, &format!("cross.{s}"), width, width, bias, Group::Rest);
        let (query, key, value) = (lin("q", true)?, lin("k", false)?, lin("v", true)?);
        Ok(CrossParams {
            query,
            key,
            value,
            ln_gain: store.add_ones("cross.ln_gain", &[width], Group::Rest)?,
            ln_bias: store.add_zeros("cross.ln_bias", &[width], Group::Rest)?,
        })
    }
}

/// Tokens attend to utterances: `LN(H'_tok + softmax(Q Kᵀ/√d) V)`. Returns
/// the fused tokens and the attention matrix.
pub fn global_local_interact(g: &mut Graph, store: &ParamStore, p: &CrossParams, h_tok: Var, h_utt: Var) -> Result<(Var, Var), TensorError> {
    if g.value(h_tok).cols() != g.value(h_utt).cols() {
        return Err(TensorError::Shape { op: "global_local_interact", left: g.value(h_tok).shape().to_vec(), right: g.value(h_utt).shape().to_vec() });
    }
    let q = p.query.forward(g, store, h_tok)?;
    let k = p.key.forward(g, store, h_utt)?;
    let v = p.value.forward(g, store, h_utt)?;
    let (z, a) = attention(g, q, k, v)?;
    let sum = g.add(h_tok, z)?;
    let gain = g.param(store, p.ln_gain);
    let bias = g.param(store, p.ln_bias);
    Ok((g.layer_norm(sum, gain, bias, LN_EPS)?, a))
}
