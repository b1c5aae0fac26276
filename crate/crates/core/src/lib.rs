//! Low-rank compression toolkit for weight matrices.
//!
//! Picks per-layer ranks from a single relative-error tolerance (or a
//! parameter budget), then factors each weight `W ≈ A B` with plain SVD, a
//! Cholesky-whitened closed form, or alternating least squares against a
//! calibration covariance. The allocation theory is checked against an exact
//! knapsack oracle, and the first-order loss-sensitivity bound against exact
//! forward differences on small feed-forward networks.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`). The
//! pipeline runs in `f64`; the aliases below name those instantiations.

// `!(x > floor)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocate;
pub mod error;
pub mod factorize;
pub mod linalg;
pub mod matrix;
pub mod scalar;
pub mod sensitivity;
pub mod spectrum;
pub mod synthetic;
pub mod tensorio;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use scalar::Scalar;

pub type Matrix64 = matrix::Matrix<f64>;
pub type Matrix32 = matrix::Matrix<f32>;
pub type SvdResult64 = linalg::SvdResult<f64>;
pub type SpectrumProfile64 = spectrum::SpectrumProfile<f64>;
pub type RankAllocation64 = allocate::RankAllocation<f64>;
pub type LowRankFactors64 = factorize::LowRankFactors<f64>;
pub type Covariance64 = tensorio::Covariance<f64>;
pub type ToyNetwork64 = sensitivity::ToyNetwork<f64>;
