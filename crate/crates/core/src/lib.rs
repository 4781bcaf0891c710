//! Building blocks for multi-view semantic segmentation with implicit neural
//! fields: a small reverse-mode autodiff tape, pinhole ray geometry, a color
//! radiance field with volume rendering, a density-selected ray transformer,
//! a texture CNN, an analytic oracle scene, and segmentation metrics.
//!
//! The crate is `no_std` (with `alloc`). The `std` feature only enables
//! runtime CPU feature detection in the matrix multiply kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod cnn;
pub mod compositing;
pub mod error;
pub mod field;
pub mod geometry;
mod linalg;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod transformer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
