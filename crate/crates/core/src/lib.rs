//! Core numerics for learning multi-tissue fODFs from single-shell diffusion MRI.
//!
//! Everything in this crate is a pure function of its inputs and builds
//! without `std` (an allocator is required). File formats, the command line
//! and any parallel scheduling live in the `fodfnet` companion crate.
//!
//! Module map:
//! - [`sh`], [`sphere`], [`peaks`]: real symmetric spherical harmonics, sphere
//!   tessellations and fODF peak extraction.
//! - [`volume`], [`dataset`]: 4D volumes, gradient schemes, b0 normalization,
//!   shell extraction and voxel/patch sample assembly.
//! - [`phantom`]: synthetic multi-tissue signal generator with analytic ground truth.
//! - [`csd`]: single-shell constrained spherical deconvolution baseline.
//! - [`nn`], [`models`]: layer kernels, Adam, gradient checking and the two
//!   residual architectures with their composite loss.
//! - [`metrics`]: angular correlation, RMSE, maps, signed-rank test.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod csd;
pub mod dataset;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod peaks;
pub mod phantom;
pub mod sh;
pub mod sphere;
pub mod volume;

pub use error::{Error, Result};
pub use sh::{Direction, ShCoefficients};
pub use volume::{Mask, Volume4D};
