//! Expert kernel generation networks (EKGNet) for hyperspectral image
//! classification: dynamic 3D convolutions whose kernels are per-sample
//! mixtures of expert kernels, inside a fully dense 3D-DenseNet.

pub mod checkpoint;
pub mod conv;
pub mod densenet;
pub mod error;
pub mod experiment;
pub mod expert;
pub mod gradcheck;
pub mod hsi;
pub mod mapping;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DType, Scalar};
pub use tensor::{Tape, Tensor, Var};
