//! Desk-scale transformer language models: staged subsequence-length
//! training, position-infused attention with a cache of the previous
//! subsequence, the nonoverlapping / sliding-window / cached inference
//! regimes, and exact attention cost accounting.

pub mod analysis;
pub mod autograd;
pub mod data;
mod error;
pub mod inference;
pub mod kv;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{Cache, Model, ModelConfig, Variant};
pub use tensor::{Scalar, Tensor};
