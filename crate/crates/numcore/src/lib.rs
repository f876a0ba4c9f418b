//! Tensor substrate for the point-cloud expert model: a dense [`Tensor`], a
//! tape-style [`Graph`] with reverse-mode gradients, a splittable [`Rng`] and
//! finite-difference checking helpers.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{NumError, Result};
pub use graph::{Graph, Var};
pub use rng::{Rng, RngState};
pub use scalar::Scalar;
pub use tensor::Tensor;
