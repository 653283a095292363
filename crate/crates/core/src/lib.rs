//! Sharpness-aware optimization toolkit: a small reverse-mode autodiff core,
//! MLP/CNN models with a batch-norm toggle, SGD / SAM / ASAM optimizers,
//! loss-landscape sharpness probes and seeded experiment runners.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiments;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sharpness;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
