//! Paired-modality generation and recognition on a tape-based f64 autodiff
//! core: a dual variational autoencoder that emits identity-consistent image
//! pairs from copied Gaussian noise, plus the machinery to train and measure
//! a cross-modality recognizer with those pairs.

pub mod error;
pub mod gradcheck;
pub mod hfr;
pub mod kernels;
pub mod dvg;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod synthdata;
pub mod tape;
pub mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
