//! Desk-scale laboratory for robust fine-tuning.
//!
//! Pretrain a small classifier on a broad synthetic multi-style mixture,
//! fine-tune it on one style with a feature-protection method, then measure
//! in-distribution and shifted-style accuracy and how much linearly
//! decodable information the features retain.

pub mod autodiff;
pub mod bench;
pub mod error;
pub mod harness;
pub mod methods;
pub mod model;
pub mod optim;
pub mod params;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{param_delta, ParamMap};
pub use tensor::Tensor;
