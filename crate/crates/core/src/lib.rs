//! Post-training piecewise linear quantization (PWLQ).
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`format`]: dense `f32` tensors, channel slicing, statistics
//!   and the `QTNS`/`QTNQ` binary containers.
//! - [`distribution`]: symmetric Gaussian/Laplacian models truncated to `[-m, m]`.
//! - [`uniform`] and [`pwlq`]: the affine uniform quantizer and the piecewise
//!   linear quantizer built from `(b-1)`-bit uniform pieces.
//! - [`error_analysis`] and [`solver`]: closed-form expected error, its
//!   derivatives, and breakpoint search.
//! - [`bias`], [`calibration`], [`datapath`]: weight bias correction, activation
//!   range calibration, and an integer inner-product datapath simulator.
//! - [`recipe`]: end-to-end tensor quantization driven by a [`recipe::Recipe`].

pub mod bias;
pub mod calibration;
pub mod datapath;
pub mod distribution;
pub mod error;
pub mod error_analysis;
pub mod format;
pub mod pwlq;
pub mod quantized;
pub mod recipe;
pub mod solver;
pub mod tensor;
pub mod uniform;

pub use error::{Error, Result};
pub use quantized::{Encoding, Granularity, QuantizedTensor};
pub use tensor::{Tensor, TensorStats};
