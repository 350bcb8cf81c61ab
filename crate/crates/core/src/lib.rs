//! Diabetic retinopathy grading with a global attention block (channel +
//! spatial attention) followed by a category attention block, on top of a
//! pluggable CNN backbone.
//!
//! The crate carries its own small tensor engine with reverse-mode
//! differentiation ([`autograd`]), the attention blocks ([`attention`]), a
//! reference backbone and model assembly ([`backbone`]), data preparation
//! ([`datapipe`]), evaluation metrics ([`metrics`]), the two-phase training
//! loop ([`trainer`]) and Grad-CAM visualisation ([`explain`]).

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod datapipe;
pub mod error;
pub mod explain;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod param;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
