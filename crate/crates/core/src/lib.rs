//! Variational Gaussian process (VGP) inference.
//!
//! A VGP draws a latent input `xi`, warps it through a random mapping drawn
//! from a Gaussian process conditioned on learned *variational data*, and uses
//! the warped output as the parameters of a mean-field distribution over the
//! latent variables of a target model. This crate holds the numerical core:
//!
//! - [`kernel`]: ARD and linear kernels, Cholesky, and GP conditional moments.
//! - [`vgp`]: the generative process and its reparameterization.
//! - [`objective`]: the auto-encoding bound, analytic Gaussian KLs, the auxiliary model.
//! - [`autodiff`]: hand-written pullbacks for the whole objective, finite
//!   differences, and the score-function estimator for discrete mean-fields.
//! - [`nets`]: feed-forward inference networks for amortized inference.
//! - [`train`]: RMSProp with a decaying schedule, the fitting loop, evaluation.
//! - [`targets`]: a zoo of target posteriors with exact reference quantities.
//! - [`universal`]: the quantile-anchoring convergence experiment.
//!
//! The crate is `no_std` and needs only `alloc`; IO, timing, and the command
//! line live in the companion `vgp` crate.

#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod nets;
pub mod objective;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod targets;
pub mod train;
pub mod universal;
pub mod vgp;

pub use error::{Error, Result};
pub use kernel::{GpConditional, KernelKind, KernelParams, VariationalData};
pub use linalg::Matrix;
pub use objective::{AuxiliaryParams, BoundMode, ObjectiveEstimate};
pub use targets::TargetModel;
pub use vgp::{FamilyKind, InputMode, LatentInput, MappingSample, MeanFieldFamily};
