//! Fractal information flow for image restoration transformers.
//!
//! Channel-last tensors, a tape-based autodiff [`graph`], window partitioning
//! and fractal regrouping ([`partition`]), the attention and FFN blocks of the
//! fractal layer ([`fifm`]), columnar and U-shaped [`models`], and the cost and
//! receptive-field [`analysis`] used to audit them.

pub mod analysis;
pub mod attention;
pub mod error;
pub mod fifm;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod models;
pub mod params;
pub mod partition;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{FlopCount, Gradients, Graph, Var};
pub use params::{BoundParams, ParamSpec, ParamStore};
pub use tensor::{DType, Scalar, Tensor};
