//! Relation-aware propagation over the utterance DAG, plus the reply-tree
//! GCN used when the DAG is ablated away.
//!
//! Nodes are updated in id order. Node `i` attends over its predecessors'
//! current-layer states with its own previous-layer state as the query, then
//! folds the aggregated message in with two GRUs whose state and input roles
//! are swapped.

use std::rc::Rc;

use thiserror::Error;

use crate::dag::{GraphVariant, Relation, TcDag};
use crate::tensor::{gru_cell, Graph, Group, GruParams, Linear, ParamId, ParamStore, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GnnError {
    #[error("layer count must be at least 1")]
    NoLayers,
    #[error("node {0} has no predecessors to attend over")]
    NoNeighbors(usize),
    #[error("graph has {graph} nodes but features have {features} rows")]
    Size { graph: usize, features: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, GnnError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagLayer {
    /// `W_α` split into the halves acting on `h_j` and on `h_i`.
    pub attn_src: ParamId,
    pub attn_dst: ParamId,
    /// `W_0` (different speakers) and `W_1` (same speaker).
    pub relation: [ParamId; 2],
    pub gru_h: GruParams,
    pub gru_c: GruParams,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DagGnnParams {
    pub layers: Vec<DagLayer>,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub width: usize,
}

impl DagGnnParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(GnnError::NoLayers);
        }
        let mut out = Vec::with_capacity(layers);
        for l in 1..=layers {
            let p = format!("{name}.l{l}");
            out.push(DagLayer {
                attn_src: store.add_xavier(&format!("{p}.attn_src"), width, 1, Group::Rest)?,
                attn_dst: store.add_xavier(&format!("{p}.attn_dst"), width, 1, Group::Rest)?,
                relation: [
                    store.add_xavier(&format!("{p}.w_rel0"), width, width, Group::Rest)?,
                    store.add_xavier(&format!("{p}.w_rel1"), width, width, Group::Rest)?,
                ],
                gru_h: GruParams::new(store, &format!("{p}.gru_h"), width, width, Group::Rest)?,
                gru_c: GruParams::new(store, &format!("{p}.gru_c"), width, width, Group::Rest)?,
            });
        }
        Ok(DagGnnParams {
            layers: out,
            ln_gain: store.add_ones(&format!("{name}.ln_gain"), &[width], Group::Rest)?,
            ln_bias: store.add_zeros(&format!("{name}.ln_bias"), &[width], Group::Rest)?,
            width,
        })
    }
}

/// `softmax_j(W_α [h_j ‖ h_i])` as a `1 × k` row; `neighbors` is `k × d`.
pub fn relational_attention(g: &mut Graph, store: &ParamStore, layer: &DagLayer, h_i: Var, neighbors: Var) -> Result<Var> {
    if g.value(neighbors).rows() == 0 {
        return Err(GnnError::NoNeighbors(0));
    }
    let src = g.param(store, layer.attn_src);
    let dst = g.param(store, layer.attn_dst);
    let per_neighbor = g.matmul(neighbors, src)?;
    let own = g.matmul(h_i, dst)?;
    let logits = g.add_row(per_neighbor, own)?;
    let logits = g.transpose(logits);
    Ok(g.softmax_rows(logits)?)
}

/// `m_i = Σ_j α_ij W_{r_ij} h_j` as a `1 × d` row.
pub fn aggregate_context(
    g: &mut Graph,
    store: &ParamStore,
    layer: &DagLayer,
    alpha: Var,
    neighbors: Var,
    relations: &[Relation],
) -> Result<Var> {
    let (k, d) = g.value(neighbors).dims2();
    if relations.len() != k || g.value(alpha).len() != k {
        return Err(GnnError::Tensor(TensorError::Shape {
            op: "aggregate_context",
            left: g.value(alpha).shape().to_vec(),
            right: vec![relations.len(), k],
        }));
    }
    let mut projected: Option<Var> = None;
    for r in [Relation::OtherSpeaker, Relation::SameSpeaker] {
        if !relations.contains(&r) {
            continue;
        }
        let w = g.param(store, layer.relation[r.index()]);
        let p = g.matmul(neighbors, w)?;
        let p = if relations.iter().all(|&x| x == r) {
            p
        } else {
            let mask: Vec<f64> = relations.iter().flat_map(|&x| std::iter::repeat_n(if x == r { 1.0 } else { 0.0 }, d)).collect();
            g.mul_const(p, Rc::new(mask))?
        };
        projected = Some(match projected {
            Some(acc) => g.add(acc, p)?,
            None => p,
        });
    }
    let projected = projected.expect("k >= 1 neighbors");
    Ok(g.matmul(alpha, projected)?)
}

/// `GRU_H(state = h, input = m) + GRU_C(state = m, input = h)`.
pub fn dual_gru_update(g: &mut Graph, store: &ParamStore, layer: &DagLayer, h_prev: Var, m: Var) -> Result<Var> {
    let m_in = g.dropout(m)?;
    let h_in = g.dropout(h_prev)?;
    let h_tilde = gru_cell(g, store, &layer.gru_h, h_prev, m_in)?;
    let c = gru_cell(g, store, &layer.gru_c, m, h_in)?;
    Ok(g.add(h_tilde, c)?)
}

/// Runs all layers over `h_utt` (`n × d`, row `i − 1` is utterance `i`) and
/// returns `LN(H + H^(L))`.
pub fn dag_forward(g: &mut Graph, store: &ParamStore, params: &DagGnnParams, dag: &TcDag, h_utt: Var) -> Result<Var> {
    let n = g.value(h_utt).rows();
    if n != dag.node_count() {
        return Err(GnnError::Size { graph: dag.node_count(), features: n });
    }
    if params.layers.is_empty() {
        return Err(GnnError::NoLayers);
    }
    let mut prev: Vec<Var> = (0..n).map(|i| g.gather_rows(h_utt, &[i])).collect::<std::result::Result<_, _>>()?;
    for layer in &params.layers {
        let mut cur: Vec<Var> = Vec::with_capacity(n);
        for id in 1..=n {
            let preds = dag.predecessors(id);
            if preds.is_empty() {
                cur.push(prev[id - 1]);
                continue;
            }
            let rows: Vec<Var> = preds.iter().map(|&(j, _)| cur[j - 1]).collect();
            let relations: Vec<Relation> = preds.iter().map(|&(_, r)| r).collect();
            let neighbors = g.concat_rows(&rows)?;
            let alpha = relational_attention(g, store, layer, prev[id - 1], neighbors)?;
            let alpha = g.dropout(alpha)?;
            let m = aggregate_context(g, store, layer, alpha, neighbors, &relations)?;
            cur.push(dual_gru_update(g, store, layer, prev[id - 1], m)?);
        }
        prev = cur;
    }
    let h_l = g.concat_rows(&prev)?;
    let sum = g.add(h_utt, h_l)?;
    let gain = g.param(store, params.ln_gain);
    let bias = g.param(store, params.ln_bias);
    Ok(g.layer_norm(sum, gain, bias, LN_EPS)?)
}

/// `D^(−1/2) (A + I) D^(−1/2)`.
pub fn normalized_adjacency(a: &Tensor) -> std::result::Result<Tensor, TensorError> {
    let (r, c) = a.dims2();
    if r != c {
        return Err(TensorError::Shape { op: "normalized_adjacency", left: a.shape().to_vec(), right: vec![c, r] });
    }
    let mut m = a.clone();
    for i in 0..r {
        m.set(i, i, m.at(i, i) + 1.0);
    }
    let deg: Vec<f64> = (0..r).map(|i| m.row_slice(i).iter().sum::<f64>()).collect();
    for i in 0..r {
        for j in 0..r {
            let v = m.at(i, j);
            if v != 0.0 {
                m.set(i, j, v / (deg[i] * deg[j]).sqrt());
            }
        }
    }
    Ok(m)
}

/// Stack of `relu(Â H W + b)` layers.
pub fn gcn_stack(g: &mut Graph, store: &ParamStore, layers: &[Linear], a_hat: Var, h: Var) -> std::result::Result<Var, TensorError> {
    let mut x = h;
    for lin in layers {
        let agg = g.matmul(a_hat, x)?;
        let y = lin.forward(g, store, agg)?;
        x = g.relu(y);
    }
    Ok(x)
}

/// Undirected reply-tree GCN over utterances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplyGcnParams {
    pub layers: Vec<Linear>,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

impl ReplyGcnParams {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, layers: usize) -> Result<Self> {
        if layers == 0 {
            return Err(GnnError::NoLayers);
        }
        let layers = (1..=layers)
            .map(|l| Linear::new(store, &format!("{name}.l{l}"), width, width, true, Group::Rest))
            .collect::<std::result::Result<_, _>>()?;
        Ok(ReplyGcnParams {
            layers,
            ln_gain: store.add_ones(&format!("{name}.ln_gain"), &[width], Group::Rest)?,
            ln_bias: store.add_zeros(&format!("{name}.ln_bias"), &[width], Group::Rest)?,
        })
    }
}

/// Symmetric adjacency of any edge set (edge direction dropped).
pub fn undirected_adjacency(dag: &TcDag) -> Tensor {
    let n = dag.node_count();
    let mut a = Tensor::zeros(&[n, n]);
    for e in dag.edges() {
        a.set(e.source - 1, e.target - 1, 1.0);
        a.set(e.target - 1, e.source - 1, 1.0);
    }
    a
}

/// `LN(H + GCN(Â, H))` over the graph's undirected edges.
pub fn reply_gcn_forward(g: &mut Graph, store: &ParamStore, params: &ReplyGcnParams, dag: &TcDag, h_utt: Var) -> Result<Var> {
    let n = g.value(h_utt).rows();
    if n != dag.node_count() {
        return Err(GnnError::Size { graph: dag.node_count(), features: n });
    }
    debug_assert_eq!(dag.variant(), GraphVariant::Reply);
    let a_hat = g.constant(normalized_adjacency(&undirected_adjacency(dag))?);
    let h_l = gcn_stack(g, store, &params.layers, a_hat, h_utt)?;
    let sum = g.add(h_utt, h_l)?;
    let gain = g.param(store, params.ln_gain);
    let bias = g.param(store, params.ln_bias);
    Ok(g.layer_norm(sum, gain, bias, LN_EPS)?)
}
