//! Neural tangent transfer: label-free discovery of trainable sparse networks.
//!
//! The library finds sparse "student" initializations whose training dynamics
//! mimic those of a dense "teacher" by matching the teacher's initial outputs
//! and empirical neural tangent kernel on unlabeled data. It also implements
//! foresight-pruning baselines (SNIP variants, magnitude, random) and the
//! supervised training pipeline used to evaluate the resulting masks.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod network;
pub mod ntk;
pub mod optim;
pub mod pruning;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod transfer;

pub use error::{Error, Result};
pub use tensor::Tensor;
