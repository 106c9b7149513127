//! Multi-image visual question answering over unsupervised anomaly
//! detection outputs.
//!
//! An image triple (original, anomaly map, pseudo-healthy reconstruction) is
//! encoded by a visual backbone, optionally refined by a query transformer
//! with learnable queries, fused into one conditioning sequence, and decoded
//! into an answer by a causal language decoder.

pub mod archive;
pub mod autograd;
pub mod backbone;
pub mod fusion;
pub mod kq_former;
pub mod decoder;
pub mod model;
pub mod training;
pub mod evaluation;
pub mod data;
pub mod error;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Matrix;
