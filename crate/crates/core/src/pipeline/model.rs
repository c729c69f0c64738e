//! Full forward pass from token ids to grid logits.

use std::rc::Rc;

use super::config::PipelineConfig;
use super::encoder::{embed_encode, EncoderParams};
use super::knowledge::{
    ck_encode, default_adjacency, global_local_interact, syntactic_adjacency, thread_tokens, topk_aggregate, CkParams, CrossParams,
    ExternalAdjacency, ThreadFeatures,
};
use super::vocab::Vocab;
use super::PipelineError;
use crate::dag::{build_graph, GraphVariant, TcDag};
use crate::dialogue::{build_token_index, decompose_threads, parse_dialogue, NullPolicy, Record, ThreadDecomposition, TokenIndexMap, TokenLayout};
use crate::drope::Positions;
use crate::gnn::{dag_forward, reply_gcn_forward, DagGnnParams, ReplyGcnParams};
use crate::grid::{decode_quadruples, encode_grids, predict_grids, score_grids, weighted_ce_loss, GridLogits, LabelGrids, Quadruple, TaskHeads};
use crate::tensor::{grad_check_sampled, GradCheckReport, Graph, Group, Linear, ParamStore, RowMap, Tensor, TensorError, Var};

/// A record with everything the model needs precomputed.
#[derive(Debug, Clone)]
pub struct Example {
    pub record: Record,
    pub threads: ThreadDecomposition,
    pub map: TokenIndexMap,
    pub dag: TcDag,
    pub positions: Positions,
    pub gold: LabelGrids,
    pub ids: Vec<usize>,
    /// Flattened token indices per thread.
    pub thread_tokens: Vec<Vec<usize>>,
    pub syn: Vec<Tensor>,
    /// Fixed `(A_syn, A_sem)` per thread from an adjacency file.
    pub external: Option<Vec<(Tensor, Tensor)>>,
}

impl Example {
    pub fn prepare(record: Record, vocab: &Vocab, cfg: &PipelineConfig, adjacency: Option<&ExternalAdjacency>) -> Result<Self, PipelineError> {
        let d = &record.dialogue;
        let threads = decompose_threads(d);
        let map = build_token_index(d, &threads, TokenLayout::Wrapped);
        let dag = build_graph(d, &threads, cfg.window, cfg.graph_variant)?;
        let gold = encode_grids(&map, &record.quads)?;
        let ids = vocab.encode(d, &map);
        let tt = thread_tokens(&threads, &map);
        let syn = tt.iter().map(|t| syntactic_adjacency(t, &map)).collect();
        let external = match adjacency {
            Some(a) => a.matrices(&d.doc_id, &tt.iter().map(Vec::len).collect::<Vec<_>>())?,
            None => None,
        };
        Ok(Example { positions: Positions::from_index(&map), record, threads, map, dag, gold, ids, thread_tokens: tt, syn, external })
    }

    pub fn doc_id(&self) -> &str {
        &self.record.dialogue.doc_id
    }

    pub fn utterances(&self) -> usize {
        self.record.dialogue.len()
    }
}

pub fn prepare_all(
    records: &[Record],
    vocab: &Vocab,
    cfg: &PipelineConfig,
    adjacency: Option<&ExternalAdjacency>,
) -> Result<Vec<Example>, PipelineError> {
    records.iter().map(|r| Example::prepare(r.clone(), vocab, cfg, adjacency)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum UtteranceGraph {
    Dag(DagGnnParams),
    Reply(ReplyGcnParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub ck: CkParams,
    pub gate: Linear,
    pub graph: UtteranceGraph,
    pub cross: CrossParams,
    pub heads: TaskHeads,
}

/// Intermediate tensors of one forward pass.
pub struct Forward {
    pub logits: GridLogits,
    pub h_tok: Var,
    pub h_utt: Var,
    pub h_utt_final: Var,
    pub h_final: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub params: ModelParams,
}

impl Model {
    pub fn new(cfg: &PipelineConfig, vocab: Vocab) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let mut store = ParamStore::new(cfg.seed);
        let d = cfg.d;
        let encoder = EncoderParams::new(&mut store, vocab.len(), d, cfg.encoder_layers)?;
        let ck = CkParams::new(&mut store, d, cfg.gcn_layers)?;
        let gate = Linear::new(&mut store, "topk.gate", d, 1, true, Group::Rest)?;
        let graph = match cfg.graph_variant {
            GraphVariant::Reply => UtteranceGraph::Reply(ReplyGcnParams::new(&mut store, "utt_gcn", d, cfg.dag_layers)?),
            _ => UtteranceGraph::Dag(DagGnnParams::new(&mut store, "dag", d, cfg.dag_layers)?),
        };
        let cross = CrossParams::new(&mut store, d)?;
        let heads = TaskHeads::new(&mut store, d, cfg.head_width, cfg.rope())?;
        Ok(Model { cfg: cfg.clone(), vocab, store, params: ModelParams { encoder, ck, gate, graph, cross, heads } })
    }

    /// Replaces the parameter store with a checkpointed one after checking
    /// that names and shapes line up.
    pub fn load_store(&mut self, store: ParamStore) -> Result<(), PipelineError> {
        if store.len() != self.store.len() {
            return Err(PipelineError::Checkpoint(format!("{} parameters, model expects {}", store.len(), self.store.len())));
        }
        for (a, b) in self.store.ids().zip(store.ids()) {
            if self.store.name(a) != store.name(b) || self.store.value(a).shape() != store.value(b).shape() {
                return Err(PipelineError::Checkpoint(format!("parameter mismatch at `{}`", self.store.name(a))));
            }
        }
        self.store = store;
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, ex: &Example) -> Result<Forward, PipelineError> {
        forward_with(g, &self.store, &self.params, &self.cfg, ex)
    }

    pub fn loss(&self, g: &mut Graph, ex: &Example) -> Result<Var, PipelineError> {
        let f = self.forward(g, ex)?;
        Ok(weighted_ce_loss(g, &f.logits, &ex.gold, &self.cfg.class_weights)?)
    }

    /// Arg-max grids for `ex`, without dropout.
    pub fn predict_grids(&self, ex: &Example) -> Result<LabelGrids, PipelineError> {
        let mut g = Graph::new();
        let f = self.forward(&mut g, ex)?;
        Ok(predict_grids(&g, &f.logits, &ex.gold.mask))
    }

    /// Central-difference check of the loss gradient on `ex`, over every
    /// parameter or `k` sampled entries per parameter.
    pub fn grad_check(&mut self, ex: &Example, sampling: Option<(usize, u64)>) -> Result<GradCheckReport, PipelineError> {
        let (params, cfg) = (self.params.clone(), self.cfg.clone());
        Ok(grad_check_sampled(&mut self.store, |g, s| loss_with(g, s, &params, &cfg, ex), sampling)?)
    }

    pub fn predict(&self, ex: &Example) -> Result<Vec<Quadruple>, PipelineError> {
        let grids = self.predict_grids(ex)?;
        Ok(decode_quadruples(&ex.map, &grids).0)
    }
}

/// The forward pass over an explicit store, so gradient checks can perturb
/// parameters.
pub fn forward_with(g: &mut Graph, store: &ParamStore, p: &ModelParams, cfg: &PipelineConfig, ex: &Example) -> Result<Forward, PipelineError> {
    let n_tok = ex.map.len();
    let n_utt = ex.utterances();
    let mut encoded = Vec::with_capacity(ex.thread_tokens.len());
    for toks in &ex.thread_tokens {
        let ids: Vec<usize> = toks.iter().map(|&f| ex.ids[f]).collect();
        encoded.push(embed_encode(g, store, &p.encoder, &ids)?);
    }
    let sem: Vec<Tensor> = match &ex.external {
        Some(_) => Vec::new(),
        None => ex.thread_tokens.iter().zip(&encoded).map(|(t, &h)| default_adjacency(t, &ex.map, g.value(h)).1).collect(),
    };
    let features: Vec<ThreadFeatures> = ex
        .thread_tokens
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let (a_syn, a_sem) = match &ex.external {
                Some(m) => (&m[k].0, &m[k].1),
                None => (&ex.syn[k], &sem[k]),
            };
            ThreadFeatures { tokens: t, h: encoded[k], a_syn, a_sem }
        })
        .collect();
    let ck = ck_encode(g, store, &p.ck, &features, n_tok)?;
    let h_utt = topk_aggregate(g, store, &p.gate, ck.h_tok, &ex.map, n_utt, cfg.topk_ratio)?;
    let h_utt_final = match &p.graph {
        UtteranceGraph::Dag(params) => dag_forward(g, store, params, &ex.dag, h_utt)?,
        UtteranceGraph::Reply(params) => reply_gcn_forward(g, store, params, &ex.dag, h_utt)?,
    };
    let (h_final, _) = global_local_interact(g, store, &p.cross, ck.enhanced, h_utt_final)?;
    let owner: Vec<usize> = ex.map.tokens().iter().map(|t| t.utterance - 1).collect();
    let stream = g.row_combine(h_utt_final, Rc::new(RowMap::gather(n_utt, &owner)))?;
    let logits = score_grids(g, store, &p.heads, h_final, stream, &ex.positions)?;
    Ok(Forward { logits, h_tok: ck.h_tok, h_utt, h_utt_final, h_final })
}

/// Loss closure over an explicit store, for gradient checks.
pub fn loss_with(g: &mut Graph, store: &ParamStore, p: &ModelParams, cfg: &PipelineConfig, ex: &Example) -> Result<Var, TensorError> {
    let f = forward_with(g, store, p, cfg, ex).map_err(|e| TensorError::Invalid(e.to_string()))?;
    weighted_ce_loss(g, &f.logits, &ex.gold, &cfg.class_weights).map_err(|e| TensorError::Invalid(e.to_string()))
}

/// Two utterances by different speakers with one cross-utterance quadruple.
pub fn gradient_fixture() -> Record {
    parse_dialogue(
        r#"{"doc_id": "grad", "sentences": [
            {"speaker": "A", "tokens": ["phone", "ok"], "reply": -1},
            {"speaker": "B", "tokens": ["battery", "great"], "reply": 0}],
            "quadruples": [{"target": [0, 0], "aspect": [2, 2], "opinion": [3, 3], "sentiment": "pos"}]}"#,
        NullPolicy::Reject,
    )
    .expect("fixture parses")
}
