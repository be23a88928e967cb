//! Streamline tractography driven by an autoregressive transformer.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! * [`sphere`]: the discrete direction classes and Gaussian soft labels,
//! * [`volume`]: diffusion volumes, NIfTI-1 I/O, spherical-harmonic
//!   resampling and tensor FA,
//! * [`streamline`]: streamline geometry, supervision targets and TCK I/O,
//! * [`model`]: a small reverse-mode autograd and the decoder network,
//! * [`train`]: dataset assembly, KL loss, Adam and the epoch loop,
//! * [`tracker`]: seeding, argmax propagation and stopping criteria,
//! * [`phantom_eval`]: synthetic phantoms and Tractometer-style scoring.

// `!(x > 0.0)` deliberately rejects NaN; index loops mirror the maths.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod model;
pub mod phantom_eval;
pub mod sphere;
pub mod streamline;
pub mod tracker;
pub mod train;
pub mod volume;

pub use error::{Error, Result};

/// Three-component vector used for directions and RAS points.
pub type Vec3 = nalgebra::Vector3<f64>;
/// Homogeneous voxel-to-RAS transform.
pub type Affine = nalgebra::Matrix4<f64>;
