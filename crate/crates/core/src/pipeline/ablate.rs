//! Component ablations and hyperparameter sweeps under shared seeds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use super::knowledge::ExternalAdjacency;
use super::model::{prepare_all, Model};
use super::train::{evaluate_model, Trainer};
use super::vocab::Vocab;
use super::PipelineError;
use crate::dag::GraphVariant;
use crate::dialogue::Record;
use crate::drope::RopeMode;
use crate::grid::Metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// Reply-tree GCN in place of the TC-DAG.
    WithoutDag,
    /// Single-scale flat-index rotary in place of D-RoPE.
    WithoutRope,
    WithoutBoth,
    Graph(GraphVariant),
    Layers(usize),
    Window(usize),
}

impl Variant {
    pub const COMPONENTS: [Variant; 4] = [Variant::Full, Variant::WithoutDag, Variant::WithoutRope, Variant::WithoutBoth];

    pub fn apply(self, base: &PipelineConfig) -> PipelineConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::WithoutDag => c.graph_variant = GraphVariant::Reply,
            Variant::WithoutRope => c.rope_mode = RopeMode::Standard,
            Variant::WithoutBoth => {
                c = Variant::WithoutRope.apply(&Variant::WithoutDag.apply(base));
            }
            Variant::Graph(v) => c.graph_variant = v,
            Variant::Layers(l) => c.dag_layers = l,
            Variant::Window(w) => c.window = w,
        }
        c
    }

    pub fn layer_sweep() -> Vec<Variant> {
        (1..=4).map(Variant::Layers).collect()
    }

    pub fn window_sweep() -> Vec<Variant> {
        (1..=4).map(Variant::Window).collect()
    }

    pub fn graph_sweep() -> Vec<Variant> {
        [GraphVariant::Tc, GraphVariant::Standard, GraphVariant::Reply].into_iter().map(Variant::Graph).collect()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Full => f.write_str("full"),
            Variant::WithoutDag => f.write_str("no-dag"),
            Variant::WithoutRope => f.write_str("no-rope"),
            Variant::WithoutBoth => f.write_str("no-both"),
            Variant::Graph(v) => write!(f, "graph={v}"),
            Variant::Layers(l) => write!(f, "layers={l}"),
            Variant::Window(w) => write!(f, "window={w}"),
        }
    }
}

impl FromStr for Variant {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PipelineError::Variant(s.to_string());
        let num = |v: &str| v.parse::<usize>().ok().filter(|&x| x > 0).ok_or_else(bad);
        match s.split_once('=') {
            None => match s {
                "full" => Ok(Variant::Full),
                "no-dag" => Ok(Variant::WithoutDag),
                "no-rope" => Ok(Variant::WithoutRope),
                "no-both" => Ok(Variant::WithoutBoth),
                _ => Err(bad()),
            },
            Some(("graph", v)) => v.parse().map(Variant::Graph).map_err(|_| bad()),
            Some(("layers", v)) => num(v).map(Variant::Layers),
            Some(("window", v)) => num(v).map(Variant::Window),
            Some(_) => Err(bad()),
        }
    }
}

/// Display label used in result tables.
pub fn table_label(v: Variant) -> String {
    match v {
        Variant::Full => "TCDA".into(),
        Variant::WithoutDag => "w/o TC-DAG".into(),
        Variant::WithoutRope => "w/o D-RoPE".into(),
        Variant::WithoutBoth => "w/o Both".into(),
        Variant::Graph(GraphVariant::Tc) => "TC-DAG".into(),
        Variant::Graph(GraphVariant::Standard) => "Standard DAG".into(),
        Variant::Graph(GraphVariant::Reply) => "Reply-GCN".into(),
        Variant::Layers(l) => format!("L={l}"),
        Variant::Window(w) => format!("w={w}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// Mean F1 values of one variant, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariantMean {
    pub variant: Variant,
    pub target_aspect: f64,
    pub target_opinion: f64,
    pub aspect_opinion: f64,
    pub micro: f64,
    pub ident: f64,
}

impl AblationTable {
    pub fn variants(&self) -> Vec<Variant> {
        let mut out: Vec<Variant> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.variant) {
                out.push(r.variant);
            }
        }
        out
    }

    pub fn mean(&self, v: Variant) -> Option<VariantMean> {
        let rows: Vec<&Metrics> = self.rows.iter().filter(|r| r.variant == v).map(|r| &r.metrics).collect();
        if rows.is_empty() {
            return None;
        }
        let avg = |f: fn(&Metrics) -> f64| 100.0 * rows.iter().map(|m| f(m)).sum::<f64>() / rows.len() as f64;
        Some(VariantMean {
            variant: v,
            target_aspect: avg(|m| m.target_aspect.f1),
            target_opinion: avg(|m| m.target_opinion.f1),
            aspect_opinion: avg(|m| m.aspect_opinion.f1),
            micro: avg(|m| m.micro.f1),
            ident: avg(|m| m.ident.f1),
        })
    }

    /// Seed-averaged table with pair F1 and quadruple F1 columns.
    pub fn format(&self) -> String {
        let mut out = format!("{:<14} {:>7} {:>7} {:>7} {:>7} {:>7}\n", "Method", "T-A", "T-O", "A-O", "Micro", "Iden.");
        for v in self.variants() {
            let m = self.mean(v).expect("variant has rows");
            out += &format!(
                "{:<14} {:>7.2} {:>7.2} {:>7.2} {:>7.2} {:>7.2}\n",
                table_label(v),
                m.target_aspect,
                m.target_opinion,
                m.aspect_opinion,
                m.micro,
                m.ident
            );
        }
        out
    }

    /// One line per (variant, seed) run.
    pub fn format_runs(&self) -> String {
        let mut out = format!("{:<14} {:>6} {:>6} {:>7} {:>7}\n", "Method", "seed", "epoch", "Micro", "Iden.");
        for r in &self.rows {
            out += &format!(
                "{:<14} {:>6} {:>6} {:>7.2} {:>7.2}\n",
                table_label(r.variant),
                r.seed,
                r.best_epoch,
                100.0 * r.metrics.micro.f1,
                100.0 * r.metrics.ident.f1
            );
        }
        out
    }
}

/// Trains every variant under every seed and scores the best checkpoint of
/// each run on `dev`.
pub fn run_ablation(
    base: &PipelineConfig,
    train: &[Record],
    dev: &[Record],
    variants: &[Variant],
    seeds: &[u64],
    adjacency: Option<&ExternalAdjacency>,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable, PipelineError> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(PipelineError::Config("ablation needs at least one variant and one seed".into()));
    }
    let vocab = Vocab::build(train.iter().map(|r| &r.dialogue));
    let mut rows = Vec::new();
    for &v in variants {
        for &seed in seeds {
            let cfg = PipelineConfig { seed, ..v.apply(base) };
            let tr = prepare_all(train, &vocab, &cfg, adjacency)?;
            let dv = prepare_all(dev, &vocab, &cfg, adjacency)?;
            let mut trainer = Trainer::new(Model::new(&cfg, vocab.clone())?, &tr, &dv)?;
            let report = trainer.fit(|_| ())?;
            let (metrics, _) = evaluate_model(&trainer.model, &dv)?;
            let row = AblationRow { variant: v, seed, best_epoch: report.best_epoch, metrics };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::synth::{gen_synthetic, SyntheticSpec};

    #[test]
    fn without_both_composes_single_ablations() {
        let base = PipelineConfig::default();
        let both = Variant::WithoutBoth.apply(&base);
        assert_eq!(both, Variant::WithoutRope.apply(&Variant::WithoutDag.apply(&base)));
        assert_eq!(both, Variant::WithoutDag.apply(&Variant::WithoutRope.apply(&base)));
        assert_eq!(both.graph_variant, GraphVariant::Reply);
        assert_eq!(both.rope_mode, RopeMode::Standard);
        assert_eq!(Variant::Full.apply(&base), base);
        assert_eq!(Variant::Window(4).apply(&base).window, 4);
        assert_eq!(Variant::Layers(1).apply(&base).dag_layers, 1);
    }

    #[test]
    fn names_round_trip() {
        let all: Vec<Variant> = Variant::COMPONENTS.into_iter().chain(Variant::graph_sweep()).chain(Variant::layer_sweep()).chain(Variant::window_sweep()).collect();
        for v in all {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
        }
        for bad in ["", "fool", "layers=0", "window=x", "graph=tree", "depth=2"] {
            assert!(bad.parse::<Variant>().is_err(), "{bad}");
        }
    }

    #[test]
    fn table_has_one_row_per_run() {
        let records = gen_synthetic(&SyntheticSpec { dialogues: 3, min_utterances: 3, max_utterances: 3, branching: 2, quads_per_dialogue: 1, ..SyntheticSpec::default() }).unwrap();
        let cfg = PipelineConfig { d: 4, head_width: 4, encoder_layers: 1, gcn_layers: 1, dag_layers: 1, epochs: 1, ..PipelineConfig::default() };
        let variants = [Variant::Full, Variant::WithoutBoth];
        let t = run_ablation(&cfg, &records[..2], &records[2..], &variants, &[1, 2], None, |_| ()).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert_eq!(t.variants(), variants.to_vec());
        assert_eq!(t.format().lines().count(), 3);
        assert!(t.format().contains("w/o Both"));
        let again = run_ablation(&cfg, &records[..2], &records[2..], &variants, &[1, 2], None, |_| ()).unwrap();
        assert_eq!(t, again);
        assert!(run_ablation(&cfg, &records, &records, &[], &[1], None, |_| ()).is_err());
    }
}
