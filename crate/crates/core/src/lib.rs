//! Propagation-aware pruning of LoRA-adapted networks with closed-form adapter
//! correction, at a scale where every formula can be checked by brute force.
//!
//! The pipeline, per epoch: fine-tune adapters, score every prunable weight by its
//! magnitude × downstream row norm × calibration input norm ([`scoring`]), smooth the
//! scores with an EMA and prune row-wise ([`masking`]), then re-solve the adapter factor
//! `B` so pruned coordinates of `W + scale·BA` are pushed to zero ([`pbs`]). After the
//! last epoch the adapters are merged and the mask applied ([`trainer`]).

pub mod analysis;
pub mod error;
pub mod masking;
pub mod matrix;
pub mod model;
pub mod par;
pub mod pbs;
pub mod scoring;
mod svd;
pub mod toy;
pub mod trainer;

pub use error::{Result, XpertError};
pub use matrix::Matrix;
pub use model::{forward, Activation, CalibrationStats, LoraLinear, PairingRule, ToyModel};
pub use par::Parallelism;
pub use scoring::{Criterion, ScoreMatrix};
pub use trainer::{PruneConfig, RunData, RunOutput, RunRecord};
