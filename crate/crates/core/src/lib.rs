//! Thread-aware dialogue modelling for sentiment quadruple extraction.
//!
//! The crate is organised bottom-up:
//!
//! - [`dialogue`]: reply trees, thread decomposition, token coordinates.
//! - [`dag`]: the thread-constrained DAG and its comparison variants.
//! - [`tensor`]: dense tensors, reverse-mode graph, optimizer, gradient checks.
//! - [`gnn`]: relation-aware propagation over the DAG.
//! - [`drope`]: dual-scale rotary scoring with divergent-thread sign inversion.
//! - [`grid`]: label grids, grid scoring heads, loss, decoding and metrics.
//! - [`pipeline`]: the end-to-end model, synthetic data, training and ablations.

pub mod dag;
pub mod dialogue;
pub mod drope;
pub mod gnn;
pub mod grid;
pub mod pipeline;
pub mod tensor;
