//! Small neural networks with explicit model and data uncertainty
//! estimates: a reverse-mode autodiff core, stochastic-forward models,
//! attenuated losses, Monte Carlo predictors, and the synthetic tasks
//! and experiment harness that exercise them.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod uncertainty;

pub use error::{Error, Result};
pub use tensor::Tensor;
