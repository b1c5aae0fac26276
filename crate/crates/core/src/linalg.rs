//! Dense kernels with explicit numerical contracts.
//!
//! Everything here is a pure function of its inputs: no randomness, no
//! threading, fixed iteration order. Identical inputs give bit-identical
//! outputs on the same platform.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::scalar::Scalar;

/// Pseudoinverse cutoff used when callers do not supply one.
pub const DEFAULT_PINV_RTOL: f64 = 1e-10;

const MAX_JACOBI_SWEEPS: usize = 80;

/// Thin singular value decomposition `W = U diag(sigma) Vt`, `k = min(N, M)`.
#[derive(Debug, Clone)]
pub struct SvdResult<T> {
    /// `N x k`, orthonormal columns.
    pub u: Matrix<T>,
    /// Nonincreasing, nonnegative.
    pub sigma: Vec<T>,
    /// `k x M`, orthonormal rows.
    pub vt: Matrix<T>,
}

impl<T: Scalar> SvdResult<T> {
    pub fn rank_capacity(&self) -> usize {
        self.sigma.len()
    }

    /// `U_r diag(sigma_r) Vt_r`.
    pub fn reconstruct(&self, r: usize) -> Matrix<T> {
        let r = r.min(self.sigma.len());
        let ur = self.u.leading_columns(r).scale_columns(&self.sigma[..r]);
        ur.matmul(&self.vt.leading_rows(r))
    }
}

/// One-sided Jacobi SVD.
///
/// Works on the taller orientation so that the Jacobi vectors are the
/// shorter dimension. Columns that collapse to exactly zero get their `U`
/// counterpart completed to an orthonormal set. Each `U` column is signed so
/// its first entry above `epsilon` in magnitude is positive.
pub fn svd<T: Scalar>(w: &Matrix<T>) -> Result<SvdResult<T>> {
    if !w.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    let (n, m) = w.shape();
    if n >= m {
        let (u, sigma, v) = jacobi_tall(w)?;
        let mut out = SvdResult {
            u,
            sigma,
            vt: v.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    } else {
        let (u, sigma, v) = jacobi_tall(&w.transpose())?;
        let mut out = SvdResult {
            u: v,
            sigma,
            vt: u.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Returns `(U: n x m, sigma: m, V: m x m)` for `n >= m`.
fn jacobi_tall<T: Scalar>(w: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Matrix<T>)> {
    let (n, m) = w.shape();
    // Column-major working copies.
    let mut a: Vec<Vec<T>> = (0..m).map(|j| w.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..m)
        .map(|j| {
            let mut e = vec![T::zero(); m];
            e[j] = T::one();
            e
        })
        .collect();
    let tol = T::epsilon() * T::lit(n.max(1) as f64);
    // Columns at roundoff level relative to ‖W‖_F are left alone and later
    // treated as null directions; rotating them against each other need
    // not settle.
    let negligible = T::epsilon() * w.frobenius_norm();

    let mut converged = m < 2;
    for _ in 0..MAX_JACOBI_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                if alpha.sqrt() <= negligible || beta.sqrt() <= negligible {
                    continue;
                }
                let gamma = dot(&a[p], &a[q]);
                if gamma.abs() <= tol * alpha.sqrt() * beta.sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::lit(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut a, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            sweeps: MAX_JACOBI_SWEEPS,
        });
    }

    let norms: Vec<T> = a.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable: ties keep column order.
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let mut u = Matrix::zeros(n, m);
    let mut vm = Matrix::zeros(m, m);
    let mut sigma = Vec::with_capacity(m);
    let mut missing = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for i in 0..m {
            vm[(i, dst)] = v[src][i];
        }
        if s > negligible {
            for i in 0..n {
                u[(i, dst)] = a[src][i] / s;
            }
        } else {
            missing.push(dst);
        }
    }
    for dst in missing {
        complete_column(&mut u, dst);
    }
    Ok((u, sigma, vm))
}

#[inline]
fn rotate_pair<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills column `j` of `u` with a unit vector orthogonal to every other
/// nonzero column, using the standard basis vector with the largest residual.
fn complete_column<T: Scalar>(u: &mut Matrix<T>, j: usize) {
    let (n, k) = u.shape();
    let others: Vec<Vec<T>> = (0..k)
        .filter(|&c| c != j)
        .map(|c| u.column(c))
        .filter(|col| dot(col, col) > T::zero())
        .collect();
    let mut best: Option<(T, Vec<T>)> = None;
    for e in 0..n {
        let mut x = vec![T::zero(); n];
        x[e] = T::one();
        for _ in 0..2 {
            for o in &others {
                let proj = dot(o, &x);
                for (xi, &oi) in x.iter_mut().zip(o) {
                    *xi -= proj * oi;
                }
            }
        }
        let norm = dot(&x, &x).sqrt();
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, x));
        }
    }
    if let Some((norm, x)) = best {
        for i in 0..n {
            u[(i, j)] = x[i] / norm;
        }
    }
}

fn fix_signs<T: Scalar>(svd: &mut SvdResult<T>) {
    let (n, k) = svd.u.shape();
    let cutoff = T::epsilon();
    for j in 0..k {
        let lead = (0..n).map(|i| svd.u[(i, j)]).find(|x| x.abs() > cutoff);
        if matches!(lead, Some(x) if x < T::zero()) {
            for i in 0..n {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for x in svd.vt.row_mut(j) {
                *x = -*x;
            }
        }
    }
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in nonincreasing order and the matching eigenvectors
/// as columns. Only the symmetric part of `s` is meaningful.
pub fn symmetric_eigen<T: Scalar>(s: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>)> {
    if !s.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("eigendecomposition input".into()));
    }
    let n = s.rows();
    let mut a = s.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();
    let target = T::epsilon() * scale;

    let mut converged = false;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut off = T::zero();
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= target {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = if theta.is_infinite() {
                    T::zero()
                } else {
                    let sgn = if theta < T::zero() {
                        -T::one()
                    } else {
                        T::one()
                    };
                    sgn / (theta.abs() + (theta * theta + T::one()).sqrt())
                };
                if t == T::zero() {
                    a[(p, q)] = T::zero();
                    a[(q, p)] = T::zero();
                    continue;
                }
                let c = T::one() / (t * t + T::one()).sqrt();
                let sn = t * c;
                a[(p, p)] = app - t * apq;
                a[(q, q)] = aqq + t * apq;
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a[(r, p)];
                    let arq = a[(r, q)];
                    let np = c * arp - sn * arq;
                    let nq = sn * arp + c * arq;
                    a[(r, p)] = np;
                    a[(p, r)] = np;
                    a[(r, q)] = nq;
                    a[(q, r)] = nq;
                }
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = c * vrp - sn * vrq;
                    v[(r, q)] = sn * vrp + c * vrq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            sweeps: MAX_JACOBI_SWEEPS,
        });
    }
    let diag: Vec<T> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap());
    let values = order.iter().map(|&i| diag[i]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok((values, vectors))
}

/// Lower-triangular `L` with positive diagonal and `L Lᵀ = S`.
///
/// A diagonally pivoted pivot at or below `n * epsilon * max(diag S)` is
/// reported as `NotPositiveDefinite`; rank-deficient covariances land there.
pub fn cholesky<T: Scalar>(s: &Matrix<T>) -> Result<Matrix<T>> {
    if !s.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    if !s.is_finite() {
        return Err(Error::NonFinite("cholesky input".into()));
    }
    let n = s.rows();
    let max_diag = (0..n).fold(T::zero(), |acc, i| acc.max(s[(i, i)]));
    let floor = T::epsilon() * T::lit(n.max(1) as f64) * max_diag;
    check_definite(s, floor)?;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return Err(Error::NotPositiveDefinite {
                pivot: j,
                value: d.as_f64(),
            });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut x = s[(i, j)];
            for k in 0..j {
                x -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = x / djj;
        }
    }
    Ok(l)
}

/// Diagonally pivoted elimination: every pivot must exceed `floor`.
///
/// Without pivoting, a small early pivot amplifies roundoff and an exactly
/// singular matrix can leave a trailing pivot far above `floor`.
fn check_definite<T: Scalar>(s: &Matrix<T>, floor: T) -> Result<()> {
    let n = s.rows();
    let mut a = s.clone();
    let mut order: Vec<usize> = (0..n).collect();
    for j in 0..n {
        let mut p = j;
        for q in j + 1..n {
            if a[(order[q], order[q])] > a[(order[p], order[p])] {
                p = q;
            }
        }
        order.swap(j, p);
        let pj = order[j];
        let d = a[(pj, pj)];
        if !(d > floor) {
            return Err(Error::NotPositiveDefinite {
                pivot: pj,
                value: d.as_f64(),
            });
        }
        let dj = d.sqrt();
        for &pi in &order[j + 1..] {
            a[(pi, pj)] /= dj;
        }
        for (ii, &pi) in order.iter().enumerate().skip(j + 1) {
            for &pk in &order[j + 1..=ii] {
                let v = a[(pi, pk)] - a[(pi, pj)] * a[(pk, pj)];
                a[(pi, pk)] = v;
                a[(pk, pi)] = v;
            }
        }
    }
    Ok(())
}

/// Solves `X L = C` for `X` given lower-triangular `L` (row-wise back substitution).
pub fn solve_right_lower<T: Scalar>(c: &Matrix<T>, l: &Matrix<T>) -> Result<Matrix<T>> {
    let n = l.rows();
    if !l.is_square() || c.cols() != n {
        return Err(Error::ShapeMismatch(format!(
            "solve X L = C with L {}x{} and C {}x{}",
            l.rows(),
            l.cols(),
            c.rows(),
            c.cols()
        )));
    }
    let mut x = Matrix::zeros(c.rows(), n);
    for row in 0..c.rows() {
        for j in (0..n).rev() {
            let mut acc = c[(row, j)];
            for i in (j + 1)..n {
                acc -= x[(row, i)] * l[(i, j)];
            }
            x[(row, j)] = acc / l[(j, j)];
        }
    }
    Ok(x)
}

/// Moore-Penrose pseudoinverse of a symmetric matrix via eigendecomposition.
/// Eigenvalues with `|lambda| <= rel_tol * max|lambda|` are treated as zero.
pub fn pinv<T: Scalar>(s: &Matrix<T>, rel_tol: T) -> Result<Matrix<T>> {
    let (values, vectors) = symmetric_eigen(s)?;
    let n = values.len();
    let largest = values.iter().fold(T::zero(), |acc, x| acc.max(x.abs()));
    let cutoff = rel_tol * largest;
    let inv: Vec<T> = values
        .iter()
        .map(|&x| {
            if largest > T::zero() && x.abs() > cutoff {
                T::one() / x
            } else {
                T::zero()
            }
        })
        .collect();
    let scaled = vectors.scale_columns(&inv);
    let out = scaled.matmul_t(&vectors);
    debug_assert_eq!(out.shape(), (n, n));
    Ok(out)
}

/// Largest singular value; `0` for empty or zero matrices.
pub fn spectral_norm<T: Scalar>(a: &Matrix<T>) -> Result<T> {
    if a.rows() == 0 || a.cols() == 0 {
        return Ok(T::zero());
    }
    Ok(svd(a)?.sigma[0])
}
