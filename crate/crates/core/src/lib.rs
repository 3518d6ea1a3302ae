//! Differentially private knowledge distillation through synthetic text.
//!
//! The pipeline has three phases:
//!
//! 1. A teacher language model is fine-tuned on control-code-prefixed private
//!    text with DP-SGD. This is the only phase that touches private data and
//!    the only phase that spends privacy budget.
//! 2. The teacher generates a synthetic corpus, prompted only by control codes
//!    sampled from the training-set code distribution.
//! 3. A smaller student is trained on the synthetic corpus with a mixture of
//!    hard-label cross-entropy, tempered soft-label KL, and (optionally) a
//!    hidden-state MSE term, using a non-private optimizer.
//!
//! Phases 2 and 3 are post-processing of a DP model, so the student inherits
//! the teacher's `(ε, δ)` guarantee.

pub mod accountant;
pub mod corpus;
pub mod distill;
pub mod dpsgd;
mod error;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod sampler;

pub use accountant::{PrivacyBudget, PrivacyLedger};
pub use corpus::{ControlCode, PreparedExample, Record, Schema, TokenId, Vocabulary};
pub use distill::{DistillBatchOutput, KdConfig};
pub use dpsgd::{DpSgdConfig, TrainReport};
pub use error::{Error, Result};
pub use model::{ForwardOutput, ModelConfig, ParameterSet};
pub use pipeline::{ExperimentConfig, ExperimentReport, Method};
pub use sampler::{SamplerConfig, SyntheticDataset};
