//! Dynamical-isometry architecture search at desk scale.

pub mod autograd;
pub mod concentration;
pub mod data;
pub mod error;
pub mod harness;
pub mod init;
pub mod linalg;
pub mod meanfield;
pub mod quadrature;
pub mod rng;
pub mod search;
pub mod stats;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use tensor::{Dims, Tensor4};
