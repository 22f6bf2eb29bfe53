//! Patch-based attention classifier: hybrid uniform/multi-scale patch
//! proposals over a backbone feature map, channel + spatial attention with
//! residual fusion, and a regularized softmax head — on top of a small
//! reverse-mode autodiff engine, with a training/evaluation harness and
//! random-erasing image augmentation.

pub mod attention;
pub mod augment;
pub mod backbone;
pub mod data;
pub mod error;
pub mod patches;
pub mod tensor;
pub mod trainer;

pub use error::{Result, SydError};
pub use tensor::{Dtype, Scalar, Tensor};
