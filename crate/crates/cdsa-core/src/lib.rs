//! Cross-dimensional self-attention (CDSA) for multivariate, geo-tagged
//! time-series imputation.
//!
//! The crate provides dense tensor primitives over the (time, location,
//! measurement) cube, four attention variants that mix information across
//! those dimensions, a tape-based reverse-mode differentiator, a trainable
//! masked-imputation encoder, data handling (CSV cubes, normalization,
//! burst-loss masks, synthetic generators, metrics), and an analytic
//! FLOPs/parameter profiler with a wall-clock companion.

pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod model;
pub mod perf;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Dim, Shape3, Tensor};
