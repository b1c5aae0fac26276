//! Per-layer SVD error profiles and the tolerance → rank → parameter mapping.
//!
//! For a weight `W` (`N x M`, `k = min(N, M)`) with singular values
//! `σ_1 ≥ … ≥ σ_k`, the best rank-`r` approximation has relative Frobenius
//! error `e(r) = sqrt(Σ_{i>r} σ_i² / Σ_i σ_i²)`. A rank-`r` factorization
//! `A B` stores `P(r) = r (N + M)` numbers. Given a tolerance `ε`, the
//! minimal admissible rank is `r*(ε) = min { r : e(r) ≤ ε }` and the minimal
//! parameter count is `h(ε) = P(r*(ε))`.

mod envelope;

pub use envelope::{
    envelope, normalized_curve, EnvelopePair, PiecewiseLinear, ENVELOPE_GRID_POINTS,
};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::tensorio::WeightTensor;

/// Singular values below this fraction of `σ_1` count as zero at `ε = 0`.
pub const NUMERICAL_RANK_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumProfile<T> {
    pub layer_name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    /// Nonincreasing, length `min(rows, cols)`.
    pub sigma: Vec<T>,
    /// `Σ σ_i²`.
    pub total_energy: T,
    /// `tail[r] = Σ_{i>r} σ_i²` (1-based `i`), length `k + 1`.
    tail: Vec<T>,
}

/// One line of the exported profile table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProfileRow {
    pub r: usize,
    pub error: f64,
    pub params: u64,
}

impl<T: Scalar> SpectrumProfile<T> {
    /// Builds a profile from an already-computed spectrum.
    pub fn from_singular_values(
        layer_name: impl Into<String>,
        group: impl Into<String>,
        rows: usize,
        cols: usize,
        sigma: Vec<T>,
    ) -> Result<Self> {
        let layer_name = layer_name.into();
        if rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch(format!(
                "profile `{layer_name}` needs a nonempty shape, got {rows}x{cols}"
            )));
        }
        if sigma.len() != rows.min(cols) {
            return Err(Error::ShapeMismatch(format!(
                "profile `{layer_name}`: {} singular values for a {rows}x{cols} matrix",
                sigma.len()
            )));
        }
        if sigma.iter().any(|s| !s.is_finite() || *s < T::zero()) {
            return Err(Error::InvalidArgument(format!(
                "profile `{layer_name}`: singular values must be finite and nonnegative"
            )));
        }
        if sigma.windows(2).any(|p| p[0] < p[1]) {
            return Err(Error::InvalidArgument(format!(
                "profile `{layer_name}`: singular values must be nonincreasing"
            )));
        }
        let k = sigma.len();
        let mut tail = vec![T::zero(); k + 1];
        for i in (0..k).rev() {
            tail[i] = tail[i + 1] + sigma[i] * sigma[i];
        }
        Ok(Self {
            layer_name,
            group: group.into(),
            rows,
            cols,
            total_energy: tail[0],
            sigma,
            tail,
        })
    }

    pub fn from_matrix(
        layer_name: impl Into<String>,
        group: impl Into<String>,
        w: &Matrix<T>,
    ) -> Result<Self> {
        let s = svd(w)?;
        Self::from_singular_values(layer_name, group, w.rows(), w.cols(), s.sigma)
    }

    /// `k = min(N, M)`.
    pub fn max_rank(&self) -> usize {
        self.sigma.len()
    }

    /// Exactly-zero matrix: every rank has error 0 and `r*` is always 0.
    pub fn is_degenerate(&self) -> bool {
        self.total_energy == T::zero()
    }

    /// Count of `σ_i > 1e-12 σ_1`.
    pub fn numerical_rank(&self) -> usize {
        let Some(&top) = self.sigma.first() else {
            return 0;
        };
        let cutoff = T::lit(NUMERICAL_RANK_RTOL) * top;
        self.sigma.iter().take_while(|&&s| s > cutoff).count()
    }

    /// `e(r)` for `0 ≤ r ≤ k`.
    pub fn relative_error(&self, r: usize) -> Result<T> {
        if r > self.max_rank() {
            return Err(Error::RankOutOfRange {
                rank: r,
                max: self.max_rank(),
            });
        }
        Ok(self.error_at(r))
    }

    pub(crate) fn error_at(&self, r: usize) -> T {
        if self.is_degenerate() {
            return T::zero();
        }
        (self.tail[r] / self.total_energy).sqrt()
    }

    /// `e(0), e(1), …, e(k)`.
    pub fn errors(&self) -> Vec<T> {
        (0..=self.max_rank()).map(|r| self.error_at(r)).collect()
    }

    /// `r*(ε)`: the smallest rank whose error is at most `eps`, capped at the
    /// numerical rank so that `ε = 0` yields the numerical rank rather than
    /// chasing roundoff-level singular values.
    pub fn min_rank_for_tolerance(&self, eps: T) -> usize {
        if self.is_degenerate() {
            return 0;
        }
        // e(r) is nonincreasing: binary search the first admissible rank.
        let (mut lo, mut hi) = (0usize, self.max_rank());
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.error_at(mid) <= eps {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo.min(self.numerical_rank())
    }

    /// `P(r) = r (N + M)`.
    pub fn param_count(&self, r: usize) -> u64 {
        r as u64 * (self.rows + self.cols) as u64
    }

    /// `h(ε) = P(r*(ε))`.
    pub fn h_mapping(&self, eps: T) -> u64 {
        self.param_count(self.min_rank_for_tolerance(eps))
    }

    /// Dense parameter count `N M`.
    pub fn dense_params(&self) -> u64 {
        self.rows as u64 * self.cols as u64
    }

    /// `(r, e(r), P(r))` for `r = 0..=k`.
    pub fn table(&self) -> Vec<ProfileRow> {
        (0..=self.max_rank())
            .map(|r| ProfileRow {
                r,
                error: self.error_at(r).as_f64(),
                params: self.param_count(r),
            })
            .collect()
    }
}

/// Profiles a stored weight (computation in f64).
pub fn profile(w: &WeightTensor) -> Result<SpectrumProfile<f64>> {
    w.check_layer()?;
    SpectrumProfile::from_matrix(&w.name, &w.group, &w.matrix)
}
