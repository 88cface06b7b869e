//! Teacher-student fine-tuning with temperature distillation, lp-bounded
//! noise-robust training, and gradient-norm regularization, plus the safety
//! metrics and sweep harness that go with it.

pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optim;
pub mod params;
pub mod perturb;
pub mod pipeline;
pub mod precision;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
