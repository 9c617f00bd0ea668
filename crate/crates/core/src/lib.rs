//! Classification as a one-step decision problem: Expected Policy Gradient
//! (EPG), its annealed mix with cross-entropy (aEPG), a zoo of
//! entropy-regularized losses, and a class-incremental training harness,
//! built on a small reverse-mode autodiff engine.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod losses;
pub mod mdp;
pub mod model;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use losses::{LossKind, LossSpec};
pub use model::{Architecture, MlpPolicy};
pub use tensor::{Tape, Tensor, Var};
