//! Sparse-view CT and undersampled radial-MRI reconstruction toolkit.
//!
//! The library covers the classical operators (Radon transform, filtered
//! back-projection, Fourier-slice conversion of radial k-space spokes into
//! parallel-beam sinograms) together with four trainable reconstruction
//! networks built on a small reverse-mode autodiff engine: a reconstruction
//! UNet, a sinogram UNet, an unrolled primal-dual network, and a primal-dual
//! UNet that swaps the image-space convolutional block for a UNet.
//!
//! All numeric kernels are generic over [`Real`] so the same code path runs
//! in `f32` (production) and `f64` (tight-tolerance tests).

pub mod autodiff;
pub mod error;
pub mod fourier;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod models;
pub mod phantom;
pub mod pipeline;
pub mod projectors;
pub mod real;
pub mod sinogram_ops;
pub mod types;

pub use error::TomoError;
pub use real::Real;
pub use types::{Image2D, RadialKSpace, Sinogram};
