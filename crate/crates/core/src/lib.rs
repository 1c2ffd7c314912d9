//! Dual prompt learning with category-aware re-weighting for image-text
//! retrieval on a miniature frozen dual encoder.

pub mod autograd;
pub mod backbone;
pub mod category;
pub mod config;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod prompts;
pub mod retrieval;
pub mod reweight;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
