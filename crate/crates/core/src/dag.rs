//! Thread-constrained DAG over utterances.
//!
//! Every node looks back through its own thread until it has collected `ω`
//! same-speaker predecessors, taking every other-speaker utterance it passes
//! on the way. A node whose thread ran out first is anchored to the root.

use std::fmt::{self, Write as _};

use thiserror::Error;

use crate::dialogue::{Dialogue, ThreadDecomposition, ThreadRef};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DagError {
    #[error("window must be at least 1 (got {0})")]
    Window(usize),
    #[error("thread map covers {map} utterances but dialogue has {dialogue}")]
    ThreadMap { map: usize, dialogue: usize },
    #[error("unknown graph variant `{0}`")]
    Variant(String),
}

/// Binary speaker relation carried by each edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Relation {
    OtherSpeaker = 0,
    SameSpeaker = 1,
}

impl Relation {
    pub fn between(d: &Dialogue, a: usize, b: usize) -> Self {
        if d.speaker(a) == d.speaker(b) {
            Relation::SameSpeaker
        } else {
            Relation::OtherSpeaker
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub relation: Relation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphVariant {
    /// Thread-constrained DAG with root anchoring.
    #[default]
    Tc,
    /// Same walk over the full history, no thread floor or anchoring.
    Standard,
    /// Undirected reply-tree edges (consumed by a GCN instead of the DAG GNN).
    Reply,
}

impl GraphVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GraphVariant::Tc => "tc",
            GraphVariant::Standard => "standard",
            GraphVariant::Reply => "reply",
        }
    }
}

impl std::str::FromStr for GraphVariant {
    type Err = DagError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tc" => Ok(GraphVariant::Tc),
            "standard" => Ok(GraphVariant::Standard),
            "reply" => Ok(GraphVariant::Reply),
            other => Err(DagError::Variant(other.to_string())),
        }
    }
}

impl fmt::Display for GraphVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcDag {
    node_count: usize,
    edges: Vec<Edge>,
    /// Predecessors per node (index = id - 1), ascending by source id.
    preds: Vec<Vec<(usize, Relation)>>,
    window: usize,
    variant: GraphVariant,
}

impl TcDag {
    /// Assembles a graph from raw edges, without validating it.
    pub fn from_edges(node_count: usize, mut edges: Vec<Edge>, window: usize, variant: GraphVariant) -> Self {
        edges.sort();
        let mut preds = vec![Vec::new(); node_count];
        for e in &edges {
            if (1..=node_count).contains(&e.target) {
                preds[e.target - 1].push((e.source, e.relation));
            }
        }
        TcDag { node_count, edges, preds, window, variant }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Edges sorted by `(source, target, relation)`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn predecessors(&self, id: usize) -> &[(usize, Relation)] {
        &self.preds[id - 1]
    }

    /// Replaces the stored predecessor order of one node. Aggregation must not
    /// depend on it.
    pub fn permute_predecessors(&mut self, id: usize, order: &[usize]) {
        let p = &self.preds[id - 1];
        assert_eq!(order.len(), p.len());
        self.preds[id - 1] = order.iter().map(|&k| p[k]).collect();
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn variant(&self) -> GraphVariant {
        self.variant
    }

    /// Edge set with the relation flipped on one edge.
    pub fn with_flipped_relation(&self, edge: usize) -> TcDag {
        let mut edges = self.edges.clone();
        edges[edge].relation = match edges[edge].relation {
            Relation::SameSpeaker => Relation::OtherSpeaker,
            Relation::OtherSpeaker => Relation::SameSpeaker,
        };
        TcDag::from_edges(self.node_count, edges, self.window, self.variant)
    }

    /// Ids reachable from `id` along edge direction, including `id`.
    pub fn downstream(&self, id: usize) -> Vec<bool> {
        let mut reach = vec![false; self.node_count];
        reach[id - 1] = true;
        // Edges always point forward, so one ascending sweep suffices.
        for target in id + 1..=self.node_count {
            if self.preds[target - 1].iter().any(|&(s, _)| reach[s - 1]) {
                reach[target - 1] = true;
            }
        }
        reach
    }
}

fn check_inputs(d: &Dialogue, td: &ThreadDecomposition, window: usize) -> Result<(), DagError> {
    if window < 1 {
        return Err(DagError::Window(window));
    }
    if td.utterance_count() != d.len() {
        return Err(DagError::ThreadMap { map: td.utterance_count(), dialogue: d.len() });
    }
    Ok(())
}

/// Builds the thread-constrained DAG.
pub fn build_tc_dag(d: &Dialogue, td: &ThreadDecomposition, window: usize) -> Result<TcDag, DagError> {
    check_inputs(d, td, window)?;
    let mut edges = Vec::new();
    for i in 2..=d.len() {
        let thread = match td.thread_of(i) {
            ThreadRef::Thread(k) => k,
            ThreadRef::Root => unreachable!("only u_1 is the root"),
        };
        let start = td.start_of(i);
        let mut same = 0;
        let mut tau = i - 1;
        while tau >= start && same < window {
            if td.in_thread(tau, thread) {
                let relation = Relation::between(d, tau, i);
                edges.push(Edge { source: tau, target: i, relation });
                if relation == Relation::SameSpeaker {
                    same += 1;
                }
            }
            tau -= 1;
        }
        if same < window && start > 1 {
            edges.push(Edge { source: 1, target: i, relation: Relation::between(d, 1, i) });
        }
    }
    Ok(TcDag::from_edges(d.len(), edges, window, GraphVariant::Tc))
}

/// Window walk over the whole history, ignoring threads.
pub fn build_standard_dag(d: &Dialogue, window: usize) -> Result<TcDag, DagError> {
    if window < 1 {
        return Err(DagError::Window(window));
    }
    let mut edges = Vec::new();
    for i in 2..=d.len() {
        let mut same = 0;
        for tau in (1..i).rev() {
            if same >= window {
                break;
            }
            let relation = Relation::between(d, tau, i);
            edges.push(Edge { source: tau, target: i, relation });
            if relation == Relation::SameSpeaker {
                same += 1;
            }
        }
    }
    Ok(TcDag::from_edges(d.len(), edges, window, GraphVariant::Standard))
}

/// One `parent -> child` edge per reply; treated as undirected downstream.
pub fn build_reply_graph(d: &Dialogue) -> TcDag {
    let edges = d
        .utterances()
        .iter()
        .filter_map(|u| {
            u.reply_to.map(|p| Edge { source: p, target: u.id, relation: Relation::between(d, p, u.id) })
        })
        .collect();
    TcDag::from_edges(d.len(), edges, 1, GraphVariant::Reply)
}

pub fn build_graph(
    d: &Dialogue,
    td: &ThreadDecomposition,
    window: usize,
    variant: GraphVariant,
) -> Result<TcDag, DagError> {
    match variant {
        GraphVariant::Tc => build_tc_dag(d, td, window),
        GraphVariant::Standard => build_standard_dag(d, window),
        GraphVariant::Reply => {
            check_inputs(d, td, window)?;
            Ok(build_reply_graph(d))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    BackwardEdge,
    RootIncoming,
    WindowViolation,
    OffThreadSource,
    RelationMismatch,
    DuplicateEdge,
    MissingAnchor,
    SpuriousAnchor,
    NodeOutOfRange,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::BackwardEdge => "backward edge",
            ViolationKind::RootIncoming => "root has incoming edge",
            ViolationKind::WindowViolation => "window violation",
            ViolationKind::OffThreadSource => "off-thread source",
            ViolationKind::RelationMismatch => "relation mismatch",
            ViolationKind::DuplicateEdge => "duplicate edge",
            ViolationKind::MissingAnchor => "missing root anchor",
            ViolationKind::SpuriousAnchor => "spurious root anchor",
            ViolationKind::NodeOutOfRange => "node out of range",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub source: usize,
    pub target: usize,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: u{} -> u{}", self.kind.as_str(), self.source, self.target)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn contains(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return writeln!(f, "valid");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks the structural invariants appropriate to the graph's variant.
/// Violations are collected, never raised.
pub fn validate_dag(g: &TcDag, d: &Dialogue, td: &ThreadDecomposition) -> ValidationReport {
    let mut out = Vec::new();
    let n = d.len();
    let mut push = |kind, source, target| out.push(Violation { kind, source, target });

    let mut seen = std::collections::BTreeSet::new();
    for e in g.edges() {
        if e.source == 0 || e.target == 0 || e.source > n || e.target > n {
            push(ViolationKind::NodeOutOfRange, e.source, e.target);
            continue;
        }
        if !seen.insert((e.source, e.target)) {
            push(ViolationKind::DuplicateEdge, e.source, e.target);
        }
        if e.source >= e.target {
            push(ViolationKind::BackwardEdge, e.source, e.target);
        }
        if e.target == 1 {
            push(ViolationKind::RootIncoming, e.source, e.target);
        }
        if e.relation != Relation::between(d, e.source, e.target) {
            push(ViolationKind::RelationMismatch, e.source, e.target);
        }
        match g.variant() {
            GraphVariant::Tc if e.source != 1 && e.target <= n => {
                let same = td.thread_of(e.source) == td.thread_of(e.target);
                if !same || e.source < td.start_of(e.target) {
                    push(ViolationKind::OffThreadSource, e.source, e.target);
                }
            }
            GraphVariant::Reply if d.parent(e.target) != Some(e.source) => {
                push(ViolationKind::OffThreadSource, e.source, e.target);
            }
            _ => {}
        }
    }

    if g.variant() == GraphVariant::Reply {
        return ValidationReport { violations: out };
    }
    for i in 2..=n.min(g.node_count()) {
        let preds = g.predecessors(i);
        let same = preds.iter().filter(|(_, r)| *r == Relation::SameSpeaker).count();
        if same > g.window() {
            push(ViolationKind::WindowViolation, 0, i);
        }
        if g.variant() != GraphVariant::Tc || td.start_of(i) <= 1 {
            continue;
        }
        let walk_same = preds
            .iter()
            .filter(|(s, r)| *s != 1 && *r == Relation::SameSpeaker)
            .count();
        let anchors = preds.iter().filter(|(s, _)| *s == 1).count();
        if walk_same < g.window() && anchors != 1 {
            push(ViolationKind::MissingAnchor, 1, i);
        }
        if walk_same >= g.window() && anchors > 0 {
            push(ViolationKind::SpuriousAnchor, 1, i);
        }
    }
    ValidationReport { violations: out }
}

/// Graphviz text: same-speaker edges dashed, others solid.
pub fn export_dot(g: &TcDag, d: &Dialogue) -> String {
    let mut out = String::new();
    let kind = if g.variant() == GraphVariant::Reply { "graph" } else { "digraph" };
    let arrow = if g.variant() == GraphVariant::Reply { "--" } else { "->" };
    let _ = writeln!(out, "{kind} \"{}\" {{", escape(&d.doc_id));
    let _ = writeln!(out, "  rankdir=LR;");
    for u in d.utterances() {
        let _ = writeln!(out, "  u{} [label=\"u{}/{}\"];", u.id, u.id, escape(&u.speaker));
    }
    for e in g.edges() {
        let style = match e.relation {
            Relation::SameSpeaker => "dashed",
            Relation::OtherSpeaker => "solid",
        };
        let _ = writeln!(out, "  u{} {arrow} u{} [style={style}];", e.source, e.target);
    }
    out.push_str("}\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
