//! One-layer attention token selection under label noise.
//!
//! The crate covers the full pipeline: a signal/noise token generator with
//! label flips, the predictor `f(X) = νᵀXᵀ softmax(X Wᵀ p)`, full-batch
//! gradient descent on `(W, p)` with the head `ν` frozen, and diagnostics for
//! the attention-gap dynamics that separate harmful, benign and
//! non-overfitting regimes.
//!
//! Training runs through [`trainer::SubspaceModel`], which keeps every update
//! inside the span of the training tokens and never forms `W` explicitly. The
//! dense routines in [`trainer`] ([`trainer::grad_w`], [`trainer::gd_step`])
//! are the reference the engine is tested against.

pub mod data;
pub mod error;
pub mod experiment;
pub mod model;
pub mod rng;
pub mod theory;
pub mod trainer;

pub use data::{DataConfig, Dataset, Label, Sample, SignalBasis, SignalMode, TokenRole};
pub use error::{Error, Result};
pub use model::{ForwardResult, HeadNorm, ModelState};
pub use trainer::{TrainConfig, TrainTrace};
