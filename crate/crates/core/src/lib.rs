//! Shrinkage estimation of the mean matrix of a complex matrix-variate normal
//! model, with known or Wishart-estimated column covariance.
//!
//! The crate is organised bottom-up:
//!
//! - [`cmatrix`]: dense complex matrices, Hermitian Jacobi eigensolver,
//!   Cholesky, and simultaneous diagonalization of `(Z*Z, S)`.
//! - [`sampling`]: complex matrix normal and complex Wishart samplers on
//!   replicate-indexed random streams.
//! - [`calculus`]: Wirtinger / Hermitian finite-difference oracles and the
//!   closed-form derivatives of eigendecomposition components.
//! - [`estimators`]: shrinkage profiles and the estimator family.
//! - [`risk`]: losses, unbiased risk estimates, and Monte Carlo checks of the
//!   Stein and Stein-Haff identities.
//! - [`harness`]: Monte Carlo risk experiments with CSV/JSON persistence.
//! - [`verify`]: finite-difference and Monte Carlo verification suites.

// `!(x > 0.0)` style guards are used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calculus;
pub mod cmatrix;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod risk;
pub mod sampling;
pub mod stats;
pub mod verify;

pub use cmatrix::{CMatrix, HermEigen, SimDiag};
pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;
