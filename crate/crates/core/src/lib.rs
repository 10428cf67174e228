//! Spiking neural network workbench.

// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agd;
pub mod checkpoint;
pub mod cli;
pub mod convert;
pub mod data;
pub mod encoding;
pub mod energy;
pub mod error;
pub mod heads;
pub mod kernels;
pub mod metrics;
pub mod network;
pub mod neuron;
pub mod rng;
pub mod stdp;
pub mod tensor;
pub mod topology;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
