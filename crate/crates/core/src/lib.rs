//! SE(2,N) group convolutional networks.
//!
//! Lifting, group correlation and orientation projection layers built on a
//! small reverse-mode tensor engine, with kernel rotation expressed as one
//! sparse bilinear operator per `(kernel size, orientation count)` pair.

pub mod autograd;
pub mod data;
pub mod equivariance;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod kernel_rotation;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod optim;
pub mod sparse;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
