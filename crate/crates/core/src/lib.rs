//! SARMP: semantic-aware relational message passing for knowledge graph
//! completion.
//!
//! The crate is organized around six pieces:
//!
//! - [`tensor`]: a dense tensor engine with a reverse-mode differentiation
//!   tape, sufficient for the message-passing computation graph.
//! - [`kg`]: dataset ingestion, vocabularies, edge-neighborhood indexes,
//!   and negative sampling.
//! - [`model`]: the message-passing network itself — semantic Top-K neighbor
//!   selection, multi-head attention aggregation, and triplet scoring.
//! - [`train`]: the optimization loop, optimizers, and checkpointing.
//! - [`eval`]: the filtered ranking protocol (MRR, Hits@N) with
//!   relation-category breakdowns and configuration sweeps.
//! - [`rng`]: deterministic seed derivation used everywhere randomness
//!   appears.
//!
//! Numeric code is generic over the scalar type (`f32` or `f64`); all
//! verification runs in `f64`.

pub mod eval;
pub mod kg;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use scalar::Scalar;
pub use tensor::{gradient_check, Gradients, Tape, Tensor, TensorError, Var};

/// Concrete 64-bit aliases; training may instantiate the same types with
/// `f32` through the run configuration.
pub type Tensor64 = Tensor<f64>;
pub type Tape64 = Tape<f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type TrainState64 = train::TrainState<f64>;

