//! GaitGL: gait recognition from silhouette sequences with global and
//! mask-based local 3D-convolutional features.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod kernels;
pub mod mask;
pub mod net;
pub mod objective;
pub mod real;
pub mod tensor;
pub mod trainer;

pub use error::{GaitError, Result};
pub use real::{Precision, Real};
pub use tensor::Tensor;
