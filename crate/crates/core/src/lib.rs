//! Multiplication-free convolutional network kernels.
//!
//! The building blocks here replace dense multiplying convolutions with two
//! cheap operations: bit-wise shift filters whose weights are constrained to
//! `s * 2^p`, and adder filters that score patches by negative l1 distance.
//! On top of those sit ghost feature modules (a shift-based intrinsic branch
//! concatenated with a shift+adder ghost branch), residual bottlenecks, a
//! network builder, a static FLOP/parameter/memory-access analyzer, dataset
//! and checkpoint I/O, and a small deterministic trainer.

pub mod adder;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ghost;
pub mod layers;
pub mod ops;
pub mod params;
pub mod shift;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ConvGeometry, Tensor4};
