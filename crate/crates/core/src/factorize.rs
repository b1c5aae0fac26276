//! Low-rank factors `W ≈ A B` for one layer.
//!
//! Three solvers share one objective, the activation-weighted residual
//! `tr((W − AB) M (W − AB)ᵀ) = ‖W X − A B X‖_F²` with `M = X Xᵀ`:
//!
//! * [`svd_factorize`]: truncated SVD of `W` (optimal for `M = I`).
//! * [`whitened_factorize`]: truncated SVD of `W T` with `T = chol(M)`,
//!   mapped back by a triangular solve. Optimal for positive definite `M`,
//!   fails on rank-deficient `M`.
//! * [`als_factorize`]: SVD initialization followed by alternating exact
//!   minimization over `A` and `B`. Only `r x r` pseudoinverses are needed,
//!   so it runs for any positive semidefinite `M`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::allocate::RankAllocation;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, pinv, solve_right_lower, svd, DEFAULT_PINV_RTOL};
use crate::matrix::Matrix;
use crate::scalar::Scalar;
use crate::tensorio::{Covariance, WeightTensor};

/// Number of ALS sweeps when none is given.
pub const DEFAULT_ALS_ITERATIONS: usize = 10;
/// Allowed per-step increase of the ALS objective, absolute.
pub const TRACE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Svd,
    Whitened,
    Als,
}

impl Method {
    pub fn needs_covariance(self) -> bool {
        !matches!(self, Method::Svd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Svd => "svd",
            Method::Whitened => "whitened",
            Method::Als => "als",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svd" => Ok(Method::Svd),
            "whitened" => Ok(Method::Whitened),
            "als" => Ok(Method::Als),
            other => Err(Error::InvalidArgument(format!(
                "unknown method `{other}` (expected svd, whitened or als)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors<T> {
    pub layer_name: String,
    /// `N x r`.
    pub a: Matrix<T>,
    /// `r x M`.
    pub b: Matrix<T>,
    pub rank: usize,
    pub method: Method,
    pub iterations_run: usize,
}

impl<T: Scalar> LowRankFactors<T> {
    pub fn product(&self) -> Matrix<T> {
        self.a.matmul(&self.b)
    }
}

/// Objective values at initialization and after each ALS sweep.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectiveTrace<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> ObjectiveTrace<T> {
    /// No step increases the objective by more than `slack`.
    pub fn is_nonincreasing(&self, slack: T) -> bool {
        self.values.windows(2).all(|p| p[1] <= p[0] + slack)
    }

    pub fn initial(&self) -> Option<T> {
        self.values.first().copied()
    }

    pub fn last(&self) -> Option<T> {
        self.values.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsOptions<T> {
    /// Stop once `(prev − cur) ≤ tol · prev`. `None` runs every sweep.
    pub early_stop: Option<T>,
    pub pinv_rtol: T,
}

impl<T: Scalar> Default for AlsOptions<T> {
    fn default() -> Self {
        Self {
            early_stop: None,
            pinv_rtol: T::lit(DEFAULT_PINV_RTOL),
        }
    }
}

fn check_rank<T: Scalar>(w: &Matrix<T>, r: usize) -> Result<()> {
    let max = w.rows().min(w.cols());
    if r > max {
        return Err(Error::RankOutOfRange { rank: r, max });
    }
    Ok(())
}

fn check_cov<T: Scalar>(w: &Matrix<T>, m: &Matrix<T>) -> Result<()> {
    if !m.is_square() || m.rows() != w.cols() {
        return Err(Error::ShapeMismatch(format!(
            "covariance {}x{} does not match weight {}x{}",
            m.rows(),
            m.cols(),
            w.rows(),
            w.cols()
        )));
    }
    Ok(())
}

/// `tr((W − AB) M (W − AB)ᵀ)`; values in `(−1e-12, 0)` are reported as 0.
pub fn objective<T: Scalar>(
    w: &Matrix<T>,
    a: &Matrix<T>,
    b: &Matrix<T>,
    cov: &Covariance<T>,
) -> Result<T> {
    let m = &cov.matrix;
    check_cov(w, m)?;
    if a.rows() != w.rows() || b.cols() != w.cols() || a.cols() != b.rows() {
        return Err(Error::ShapeMismatch(format!(
            "factors {}x{} · {}x{} do not match weight {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols(),
            w.rows(),
            w.cols()
        )));
    }
    let resid = w - &a.matmul(b);
    let value = resid.matmul(m).inner(&resid);
    if value < T::zero() && value > -T::lit(1e-12) {
        Ok(T::zero())
    } else {
        Ok(value)
    }
}

/// Balanced truncated SVD: `A = U_r Σ_r^{1/2}`, `B = Σ_r^{1/2} V_rᵀ`.
pub fn svd_factorize<T: Scalar>(w: &Matrix<T>, r: usize) -> Result<LowRankFactors<T>> {
    check_rank(w, r)?;
    let s = svd(w)?;
    let root: Vec<T> = s.sigma[..r].iter().map(|x| x.sqrt()).collect();
    Ok(LowRankFactors {
        layer_name: String::new(),
        a: s.u.leading_columns(r).scale_columns(&root),
        b: s.vt.leading_rows(r).scale_rows(&root),
        rank: r,
        method: Method::Svd,
        iterations_run: 0,
    })
}

/// Closed-form optimum for positive definite `M` through Cholesky whitening.
pub fn whitened_factorize<T: Scalar>(
    w: &Matrix<T>,
    cov: &Covariance<T>,
    r: usize,
) -> Result<LowRankFactors<T>> {
    check_rank(w, r)?;
    check_cov(w, &cov.matrix)?;
    let t = cholesky(&cov.matrix.symmetrized())?;
    let s = svd(&w.matmul(&t))?;
    let root: Vec<T> = s.sigma[..r].iter().map(|x| x.sqrt()).collect();
    let a = s.u.leading_columns(r).scale_columns(&root);
    let c = s.vt.leading_rows(r).scale_rows(&root);
    let b = solve_right_lower(&c, &t)?;
    Ok(LowRankFactors {
        layer_name: String::new(),
        a,
        b,
        rank: r,
        method: Method::Whitened,
        iterations_run: 0,
    })
}

/// SVD initialization followed by `tau` sweeps of
/// `A ← W M Bᵀ (B M Bᵀ)†` then `B ← (AᵀA)† Aᵀ W`.
pub fn als_factorize<T: Scalar>(
    w: &Matrix<T>,
    cov: &Covariance<T>,
    r: usize,
    tau: usize,
    options: &AlsOptions<T>,
) -> Result<(LowRankFactors<T>, ObjectiveTrace<T>)> {
    check_rank(w, r)?;
    check_cov(w, &cov.matrix)?;
    let m = cov.matrix.symmetrized();
    let sym = Covariance {
        matrix: m.clone(),
        sample_count: cov.sample_count,
    };
    let mut f = svd_factorize(w, r)?;
    f.method = Method::Als;
    let mut trace = ObjectiveTrace {
        values: vec![objective(w, &f.a, &f.b, &sym)?],
    };
    if r == 0 {
        return Ok((f, trace));
    }
    for iteration in 1..=tau {
        let bm = f.b.matmul(&m);
        let gram_b = bm.matmul_t(&f.b).symmetrized();
        let a = w.matmul_t(&bm).matmul(&pinv(&gram_b, options.pinv_rtol)?);
        if !a.is_finite() {
            return Err(Error::NonFiniteIterate { iteration });
        }
        let gram_a = a.t_matmul(&a).symmetrized();
        let b = pinv(&gram_a, options.pinv_rtol)?.matmul(&a.t_matmul(w));
        if !b.is_finite() {
            return Err(Error::NonFiniteIterate { iteration });
        }
        f.a = a;
        f.b = b;
        f.iterations_run = iteration;
        let value = objective(w, &f.a, &f.b, &sym)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteIterate { iteration });
        }
        let prev = *trace.values.last().unwrap();
        trace.values.push(value);
        if let Some(tol) = options.early_stop {
            if prev - value <= tol * prev {
                break;
            }
        }
    }
    Ok((f, trace))
}

/// Factorization of one layer plus its objective before and after.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerResult<T> {
    pub factors: LowRankFactors<T>,
    pub trace: ObjectiveTrace<T>,
    /// Objective of the truncated-SVD factors.
    pub objective_init: T,
    /// Objective of the returned factors.
    pub objective_final: T,
}

/// Factors one layer with `method`. `cov` is required unless `method` is
/// [`Method::Svd`], which measures its objective with `M = I`.
pub fn compress_layer(
    tensor: &WeightTensor,
    cov: Option<&Covariance<f64>>,
    rank: usize,
    method: Method,
    tau: usize,
    options: &AlsOptions<f64>,
) -> Result<LayerResult<f64>> {
    tensor.check_layer()?;
    let w = &tensor.matrix;
    let identity;
    let cov = match (method, cov) {
        (Method::Svd, _) => {
            identity = Covariance::identity(w.cols());
            &identity
        }
        (_, Some(c)) => c,
        (_, None) => return Err(Error::MissingCovariance(tensor.name.clone())),
    };
    let mut result = match method {
        Method::Svd => {
            let f = svd_factorize(w, rank)?;
            let obj = objective(w, &f.a, &f.b, cov)?;
            LayerResult {
                factors: f,
                trace: ObjectiveTrace { values: vec![obj] },
                objective_init: obj,
                objective_final: obj,
            }
        }
        Method::Whitened => {
            let init = svd_factorize(w, rank)?;
            let init_obj = objective(w, &init.a, &init.b, cov)?;
            let f = whitened_factorize(w, cov, rank)?;
            let obj = objective(w, &f.a, &f.b, cov)?;
            LayerResult {
                factors: f,
                trace: ObjectiveTrace {
                    values: vec![init_obj, obj],
                },
                objective_init: init_obj,
                objective_final: obj,
            }
        }
        Method::Als => {
            let (f, trace) = als_factorize(w, cov, rank, tau, options)?;
            LayerResult {
                objective_init: trace.initial().unwrap(),
                objective_final: trace.last().unwrap(),
                factors: f,
                trace,
            }
        }
    };
    result.factors.layer_name = tensor.name.clone();
    Ok(result)
}

/// Runs [`compress_layer`] for every allocated layer, in tensor order.
/// Tensors absent from the allocation are left out.
pub fn compress_model(
    tensors: &[WeightTensor],
    covariances: &BTreeMap<String, Covariance<f64>>,
    alloc: &RankAllocation<f64>,
    tau: usize,
    method: Method,
    options: &AlsOptions<f64>,
) -> Result<Vec<LayerResult<f64>>> {
    for layer in &alloc.layers {
        if !tensors.iter().any(|t| t.name == layer.name) {
            return Err(Error::MissingTensor(layer.name.clone()));
        }
    }
    tensors
        .iter()
        .filter_map(|t| alloc.rank_of(&t.name).map(|r| (t, r)))
        .map(|(t, r)| compress_layer(t, covariances.get(&t.name), r, method, tau, options))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorio::covariance_from_activations;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn pd_cov(dim: usize, rng: &mut ChaCha8Rng) -> Covariance<f64> {
        covariance_from_activations(&random(dim, 4 * dim, rng)).unwrap()
    }

    #[test]
    fn objective_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(5, 4, &mut rng);
        let a = random(5, 2, &mut rng);
        let b = random(2, 4, &mut rng);
        let eye = Covariance::identity(4);
        let direct = (&w - &a.matmul(&b)).frobenius_norm_sq();
        assert!((objective(&w, &a, &b, &eye).unwrap() - direct).abs() < 1e-12);
        assert_eq!(objective(&w, &w, &Matrix::identity(4), &eye).unwrap(), 0.0);

        let x = random(4, 9, &mut rng);
        let cov = covariance_from_activations(&x).unwrap();
        let direct = (&w.matmul(&x) - &a.matmul(&b).matmul(&x)).frobenius_norm_sq();
        let trace_form = objective(&w, &a, &b, &cov).unwrap();
        assert!((trace_form - direct).abs() <= 1e-9 * direct);
        assert!(matches!(
            objective(&w, &a, &b, &Covariance::identity(3)),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn svd_factorize_examples() {
        let w = Matrix::<f64>::from_diag(3, 3, &[4.0, 3.0, 1.0]);
        let f = svd_factorize(&w, 2).unwrap();
        let resid = (&w - &f.product()).frobenius_norm_sq();
        assert!((resid - 1.0).abs() < 1e-12);
        assert!((f.a.frobenius_norm() - f.b.frobenius_norm()).abs() < 1e-12);

        let f0 = svd_factorize(&w, 0).unwrap();
        assert_eq!(f0.a.shape(), (3, 0));
        assert_eq!(f0.b.shape(), (0, 3));
        assert_eq!((&w - &f0.product()).frobenius_norm_sq(), 26.0);
        assert!(matches!(
            svd_factorize(&w, 4),
            Err(Error::RankOutOfRange { rank: 4, max: 3 })
        ));
    }

    #[test]
    fn svd_factorize_tail_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random(10, 7, &mut rng);
        let sigma = svd(&w).unwrap().sigma;
        let tail: f64 = sigma[3..].iter().map(|s| s * s).sum();
        let f = svd_factorize(&w, 3).unwrap();
        let resid = (&w - &f.product()).frobenius_norm_sq();
        assert!((resid - tail).abs() <= 1e-9 * tail);
    }

    #[test]
    fn whitened_identity_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random(6, 5, &mut rng);
        let eye = Covariance::identity(5);
        let f = whitened_factorize(&w, &eye, 2).unwrap();
        let g = svd_factorize(&w, 2).unwrap();
        let a = objective(&w, &f.a, &f.b, &eye).unwrap();
        let b = objective(&w, &g.a, &g.b, &eye).unwrap();
        assert!((a - b).abs() <= 1e-12 * b);
    }

    #[test]
    fn whitened_full_rank_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = random(5, 5, &mut rng);
        let cov = pd_cov(5, &mut rng);
        let f = whitened_factorize(&w, &cov, 5).unwrap();
        let scale = objective(&w, &Matrix::zeros(5, 0), &Matrix::zeros(0, 5), &cov).unwrap();
        assert!(objective(&w, &f.a, &f.b, &cov).unwrap() <= 1e-20 * scale.max(1.0) + 1e-20);
    }

    #[test]
    fn whitened_matches_tail_energy_of_wt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = random(6, 6, &mut rng);
        let cov = pd_cov(6, &mut rng);
        let t = cholesky(&cov.matrix).unwrap();
        let sigma = svd(&w.matmul(&t)).unwrap().sigma;
        let tail: f64 = sigma[3..].iter().map(|s| s * s).sum();
        let f = whitened_factorize(&w, &cov, 3).unwrap();
        let obj = objective(&w, &f.a, &f.b, &cov).unwrap();
        assert!((obj - tail).abs() <= 1e-8 * tail);
    }

    #[test]
    fn whitened_rejects_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = random(6, 6, &mut rng);
        let cov = covariance_from_activations(&random(6, 3, &mut rng)).unwrap();
        assert!(matches!(
            whitened_factorize(&w, &cov, 2),
            Err(Error::NotPositiveDefinite { .. })
        ));
        let (_, trace) = als_factorize(&w, &cov, 2, 10, &AlsOptions::default()).unwrap();
        assert!(trace.values.iter().all(|v| v.is_finite()));
        assert!(trace.is_nonincreasing(TRACE_SLACK));
    }

    #[test]
    fn als_exact_low_rank_stays_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = random(6, 2, &mut rng).matmul(&random(2, 5, &mut rng));
        let cov = pd_cov(5, &mut rng);
        let (_, trace) = als_factorize(&w, &cov, 2, 5, &AlsOptions::default()).unwrap();
        let scale = w.frobenius_norm_sq() * cov.matrix.max_abs();
        assert!(trace.values.iter().all(|&v| v <= 1e-20 * scale));
    }

    #[test]
    fn als_identity_cov_keeps_eckart_young_optimum() {
        let w = Matrix::<f64>::from_diag(3, 3, &[4.0, 3.0, 1.0]);
        let (f, trace) =
            als_factorize(&w, &Covariance::identity(3), 2, 10, &AlsOptions::default()).unwrap();
        assert_eq!(trace.values.len(), 11);
        for v in &trace.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert_eq!(f.iterations_run, 10);
        assert_eq!(f.method, Method::Als);
    }

    #[test]
    fn als_approaches_whitened_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = random(8, 8, &mut rng);
        let cov = pd_cov(8, &mut rng);
        let opt = {
            let f = whitened_factorize(&w, &cov, 3).unwrap();
            objective(&w, &f.a, &f.b, &cov).unwrap()
        };
        let (_, trace) = als_factorize(&w, &cov, 3, 50, &AlsOptions::default()).unwrap();
        assert!(trace.is_nonincreasing(TRACE_SLACK));
        let last = trace.last().unwrap();
        assert!(last >= opt * (1.0 - 1e-9));
        assert!(
            (last - opt) <= 1e-6 * opt,
            "als {last} vs closed form {opt}"
        );
    }

    #[test]
    fn als_early_stop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random(6, 6, &mut rng);
        let cov = pd_cov(6, &mut rng);
        let opts = AlsOptions {
            early_stop: Some(1e-9),
            ..AlsOptions::default()
        };
        let (f, trace) = als_factorize(&w, &cov, 2, 500, &opts).unwrap();
        assert!(f.iterations_run < 500);
        assert_eq!(trace.values.len(), f.iterations_run + 1);
    }

    #[test]
    fn method_parsing() {
        assert_eq!("als".parse::<Method>().unwrap(), Method::Als);
        assert!("pca".parse::<Method>().is_err());
        assert_eq!(Method::Whitened.to_string(), "whitened");
    }

    #[test]
    fn compress_model_dispatch_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tensors: Vec<WeightTensor> = (0..3)
            .map(|i| WeightTensor::new(format!("l{i}"), "g", random(6, 5, &mut rng)))
            .collect();
        let profiles: Vec<_> = tensors
            .iter()
            .map(|t| crate::spectrum::profile(t).unwrap())
            .collect();
        let covs: BTreeMap<String, Covariance<f64>> = tensors
            .iter()
            .map(|t| (t.name.clone(), pd_cov(5, &mut rng)))
            .collect();

        let zero = crate::allocate::allocate_uniform(&profiles, 1.0).unwrap();
        let out = compress_model(
            &tensors,
            &covs,
            &zero,
            10,
            Method::Als,
            &AlsOptions::default(),
        )
        .unwrap();
        for (res, t) in out.iter().zip(&tensors) {
            assert_eq!(res.factors.rank, 0);
            let cov = &covs[&t.name];
            let expected = t.matrix.matmul(&cov.matrix).inner(&t.matrix);
            assert!((res.objective_final - expected).abs() <= 1e-12 * expected);
        }

        let alloc = crate::allocate::allocate_uniform(&profiles, 0.5).unwrap();
        let out = compress_model(
            &tensors,
            &BTreeMap::new(),
            &alloc,
            10,
            Method::Svd,
            &AlsOptions::default(),
        )
        .unwrap();
        for (res, t) in out.iter().zip(&tensors) {
            let direct = svd_factorize(&t.matrix, res.factors.rank).unwrap();
            assert_eq!(res.factors.a, direct.a);
            assert_eq!(res.factors.b, direct.b);
        }
        assert!(matches!(
            compress_model(
                &tensors,
                &BTreeMap::new(),
                &alloc,
                10,
                Method::Als,
                &AlsOptions::default()
            ),
            Err(Error::MissingCovariance(_))
        ));
        assert!(matches!(
            compress_model(
                &tensors[..2],
                &covs,
                &alloc,
                10,
                Method::Als,
                &AlsOptions::default()
            ),
            Err(Error::MissingTensor(_))
        ));
    }
}
