//! Few-shot conditional question generation.

pub mod autodiff;
pub mod cli;
pub mod conditioning;
pub mod dataset;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod meta;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod selfsup;
pub mod tensor;
pub mod text;
pub mod toyset;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{GradMap, Params};
pub use tensor::Tensor;
