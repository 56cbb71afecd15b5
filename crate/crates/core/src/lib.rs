//! Plasticity injection and competing interventions for dense networks,
//! with desk-scale continual-regression and Double DQN benchmarks and the
//! evaluation statistics used to compare them.

pub mod continual;
pub mod error;
pub mod injection;
pub mod interventions;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rl;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
