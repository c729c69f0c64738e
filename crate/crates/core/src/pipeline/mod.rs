//! End-to-end model, data and training.

pub mod ablate;
pub mod config;
pub mod encoder;
pub mod knowledge;
pub mod model;
pub mod run;
pub mod synth;
pub mod train;
pub mod vocab;

pub use ablate::{run_ablation, AblationRow, AblationTable, Variant};
pub use config::PipelineConfig;
pub use model::{Example, Model};
pub use synth::{gen_synthetic, SyntheticSpec};
pub use train::{evaluate_model, EpochLog, TrainReport, Trainer};
pub use vocab::Vocab;

use thiserror::Error;

use crate::dag::DagError;
use crate::dialogue::DialogueError;
use crate::gnn::GnnError;
use crate::grid::GridError;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("data: {0}")]
    Data(String),
    #[error("synthetic spec: {0}")]
    Spec(String),
    #[error("unknown variant `{0}`")]
    Variant(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite {what} at epoch {epoch}, step {step} (doc {doc}): {value}")]
    Divergence { what: &'static str, epoch: usize, step: u64, doc: String, value: f64 },
    #[error(transparent)]
    Dialogue(#[from] DialogueError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
