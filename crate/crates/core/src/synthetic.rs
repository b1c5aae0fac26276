//! Seeded instance generators: weights with prescribed spectra, calibration
//! batches, factorization instances, envelope-respecting profile ensembles
//! and toy networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::matrix::Matrix;
use crate::sensitivity::{Activation, Loss, ToyNetwork};
use crate::spectrum::{EnvelopePair, PiecewiseLinear, SpectrumProfile, ENVELOPE_GRID_POINTS};
use crate::tensorio::{
    covariance_from_activations, CalibrationPayload, CalibrationRecord, Covariance, WeightTensor,
};

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// `n x k` matrix with orthonormal columns (`k ≤ n`), by twice-applied
/// modified Gram–Schmidt on a Gaussian draw.
pub fn orthonormal_columns<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Matrix<f64> {
    assert!(
        k <= n,
        "cannot fit {k} orthonormal columns in dimension {n}"
    );
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for q in &cols {
                let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= d * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    Matrix::from_fn(n, k, |i, j| cols[j][i])
}

/// `U diag(sigma) Vᵀ` with Haar-like random `U`, `V`.
pub fn matrix_with_spectrum<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    sigma: &[f64],
    rng: &mut R,
) -> Matrix<f64> {
    let k = sigma.len();
    assert!(
        k <= rows.min(cols),
        "{k} singular values for a {rows}x{cols} matrix"
    );
    let u = orthonormal_columns(rows, k, rng);
    let v = orthonormal_columns(cols, k, rng);
    u.scale_columns(sigma).matmul_t(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpectrumShape {
    /// `σ_i = i^{-exponent}`.
    PowerLaw {
        exponent: f64,
    },
    /// `σ_i = ratio^{i-1}`.
    Geometric {
        ratio: f64,
    },
    Flat,
}

impl SpectrumShape {
    pub fn singular_values(&self, k: usize) -> Vec<f64> {
        (1..=k)
            .map(|i| match *self {
                SpectrumShape::PowerLaw { exponent } => (i as f64).powf(-exponent),
                SpectrumShape::Geometric { ratio } => ratio.powi(i as i32 - 1),
                SpectrumShape::Flat => 1.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub group: String,
    pub rows: usize,
    pub cols: usize,
    pub spectrum: SpectrumShape,
}

impl LayerSpec {
    pub fn singular_values(&self) -> Vec<f64> {
        self.spectrum.singular_values(self.rows.min(self.cols))
    }
}

/// Twelve layers in two groups with spectra from nearly flat to steep.
pub fn mixed_spectra_spec() -> Vec<LayerSpec> {
    let shapes = [
        SpectrumShape::PowerLaw { exponent: 0.7 },
        SpectrumShape::PowerLaw { exponent: 1.0 },
        SpectrumShape::Geometric { ratio: 0.8 },
        SpectrumShape::PowerLaw { exponent: 1.5 },
        SpectrumShape::Geometric { ratio: 0.6 },
        SpectrumShape::PowerLaw { exponent: 2.5 },
    ];
    let mut out = Vec::with_capacity(12);
    for (i, &spectrum) in shapes.iter().enumerate() {
        out.push(LayerSpec {
            name: format!("block{i}.attn"),
            group: "attn".into(),
            rows: 32,
            cols: 32,
            spectrum,
        });
        let (rows, cols) = if i % 2 == 0 { (48, 32) } else { (32, 48) };
        out.push(LayerSpec {
            name: format!("block{i}.mlp"),
            group: "mlp".into(),
            rows,
            cols,
            spectrum: shapes[(i + 3) % shapes.len()],
        });
    }
    out
}

pub fn generate_model(specs: &[LayerSpec], seed: u64) -> Vec<WeightTensor> {
    let mut rng = seeded_rng(seed);
    specs
        .iter()
        .map(|s| {
            let w = matrix_with_spectrum(s.rows, s.cols, &s.singular_values(), &mut rng);
            WeightTensor::new(&s.name, &s.group, w)
        })
        .collect()
}

/// Anisotropic activation batch (`dim x samples`): columns drawn from a
/// Gaussian with random orientation and per-axis scales in `[0.5, 2]`.
/// Fewer samples than `dim` yields a rank-deficient covariance.
pub fn activation_batch<R: Rng + ?Sized>(dim: usize, samples: usize, rng: &mut R) -> Matrix<f64> {
    let q = orthonormal_columns(dim, dim, rng);
    let scales: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
    q.scale_columns(&scales)
        .matmul(&gaussian_matrix(dim, samples, rng))
}

/// One raw activation batch per tensor, sized to its input dimension.
pub fn generate_calibration(
    tensors: &[WeightTensor],
    samples: usize,
    seed: u64,
) -> Vec<CalibrationRecord> {
    let mut rng = seeded_rng(seed);
    tensors
        .iter()
        .map(|t| CalibrationRecord {
            layer_name: t.name.clone(),
            payload: CalibrationPayload::RawActivations(activation_batch(
                t.matrix.cols(),
                samples,
                &mut rng,
            )),
        })
        .collect()
}

/// `Q diag(λ) Qᵀ` with `λ_i ∈ [1, 2]`.
pub fn well_conditioned_covariance<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Covariance<f64> {
    let q = orthonormal_columns(dim, dim, rng);
    let lambda: Vec<f64> = (0..dim).map(|_| rng.random_range(1.0..2.0)).collect();
    Covariance {
        matrix: q.scale_columns(&lambda).matmul_t(&q).symmetrized(),
        sample_count: 0,
    }
}

/// Covariance of `samples < dim` activations: positive semidefinite, singular.
pub fn rank_deficient_covariance<R: Rng + ?Sized>(
    dim: usize,
    samples: usize,
    rng: &mut R,
) -> Covariance<f64> {
    assert!(samples < dim, "need fewer samples than dimensions");
    covariance_from_activations(&activation_batch(dim, samples, rng))
        .expect("nonempty finite batch")
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorizationInstance {
    pub w: Matrix<f64>,
    pub cov: Covariance<f64>,
    pub rank: usize,
}

/// Random `(W, M, r)` with both sides up to `max_dim` and `r ≤ 8`.
///
/// `W` has a geometric spectrum with ratio in `[0.3, 0.5]`, so consecutive
/// singular values are well separated. With `positive_definite` the
/// covariance has eigenvalues in `[1, 2]`; otherwise it comes from fewer
/// samples than dimensions.
pub fn factorization_instance<R: Rng + ?Sized>(
    max_dim: usize,
    positive_definite: bool,
    rng: &mut R,
) -> FactorizationInstance {
    let rows = rng.random_range(4..=max_dim);
    let cols = rng.random_range(4..=max_dim);
    let k = rows.min(cols);
    let rank = rng.random_range(1..=(k - 1).min(8));
    let ratio = rng.random_range(0.3..0.5);
    let sigma = SpectrumShape::Geometric { ratio }.singular_values(k);
    let w = matrix_with_spectrum(rows, cols, &sigma, rng);
    let cov = if positive_definite {
        well_conditioned_covariance(cols, rng)
    } else {
        let samples = rng.random_range(1..cols);
        rank_deficient_covariance(cols, samples, rng)
    };
    FactorizationInstance { w, cov, rank }
}

/// Same-shape layers whose normalized curves lie between a known pair of
/// convex nonincreasing envelopes.
#[derive(Debug, Clone, PartialEq)]
pub struct BracketedEnsemble {
    pub profiles: Vec<SpectrumProfile<f64>>,
    pub envelope: EnvelopePair,
    /// `P(k)` shared by all layers.
    pub normalizer: f64,
}

/// Envelopes `h̄(ε) = 1 + 1/k − ε` and `h̲` = piecewise-linear samples of
/// `(1 − ε)^p`, `p ∈ [2, 3]`.
///
/// Let `lo_r` be the smallest `ε` with `h̲(ε) ≤ r/k` and `hi_r = 1 − r/k`.
/// Any error sequence with `lo_r ≤ e(r) ≤ hi_r` keeps every step of `ĥ`
/// between the envelopes. Both `lo_r²` and `hi_r²` are convex in `r`, so
/// `e(r)² = (1 − u) lo_r² + u hi_r²` is too, and its decrements form a valid
/// nonincreasing spectrum. Each layer draws its own `u ∈ [0.05, 0.95]`.
pub fn bracketed_ensemble<R: Rng + ?Sized>(rng: &mut R) -> Result<BracketedEnsemble> {
    let k = rng.random_range(4..=12usize);
    let layers = rng.random_range(2..=5usize);
    let p = rng.random_range(2.0..3.0);
    let kf = k as f64;
    let upper = PiecewiseLinear::new(vec![0.0, 1.0], vec![1.0 + 1.0 / kf, 1.0 / kf])?;
    let lower = PiecewiseLinear::sample(ENVELOPE_GRID_POINTS, |e| (1.0 - e).powf(p))?;

    let bounds: Vec<(f64, f64)> = (0..=k)
        .map(|r| {
            let level = r as f64 / kf;
            let lo = lower.generalized_inverse(level).unwrap_or(0.0);
            (lo, 1.0 - level)
        })
        .collect();
    let mut profiles = Vec::with_capacity(layers);
    for l in 0..layers {
        let u = rng.random_range(0.05..0.95);
        let sq: Vec<f64> = bounds
            .iter()
            .map(|&(lo, hi)| (1.0 - u) * lo * lo + u * hi * hi)
            .collect();
        let mut sigma: Vec<f64> = sq
            .windows(2)
            .map(|w| (w[0] - w[1]).max(0.0).sqrt())
            .collect();
        for i in 1..sigma.len() {
            sigma[i] = sigma[i].min(sigma[i - 1]);
        }
        profiles.push(SpectrumProfile::from_singular_values(
            format!("layer{l}"),
            "g",
            k,
            k,
            sigma,
        )?);
    }
    Ok(BracketedEnsemble {
        profiles,
        envelope: EnvelopePair {
            lower,
            upper,
            coverage_fraction: 1.0,
            retained: (0..layers).collect(),
        },
        normalizer: 2.0 * kf * kf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Linear,
    HalfSquaredError,
}

/// Toy network with Gaussian weights scaled by `1/sqrt(fan_in)`, plus an
/// input batch and a random perturbation direction.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInstance {
    pub network: ToyNetwork<f64>,
    pub input: Matrix<f64>,
    pub direction: Vec<Matrix<f64>>,
}

/// `widths` lists the input width followed by every layer's output width.
pub fn toy_instance<R: Rng + ?Sized>(
    widths: &[usize],
    batch: usize,
    activation: Activation,
    loss: LossKind,
    rng: &mut R,
) -> Result<ToyInstance> {
    let layers: Vec<Matrix<f64>> = widths
        .windows(2)
        .map(|w| gaussian_matrix(w[1], w[0], rng).scale(1.0 / (w[0] as f64).sqrt()))
        .collect();
    let out = *widths.last().unwrap_or(&0);
    let reference = gaussian_matrix(out, batch, rng);
    let loss = match loss {
        LossKind::Linear => Loss::Linear(reference),
        LossKind::HalfSquaredError => Loss::HalfSquaredError(reference),
    };
    let network = ToyNetwork::new(layers, activation, loss)?;
    let input = gaussian_matrix(widths[0], batch, rng);
    let direction = network
        .layers
        .iter()
        .map(|w| gaussian_matrix(w.rows(), w.cols(), rng).scale(1.0 / (w.cols() as f64).sqrt()))
        .collect();
    Ok(ToyInstance {
        network,
        input,
        direction,
    })
}

/// Random depth in `1..=max_layers` and widths in `2..=max_width`.
pub fn random_toy_instance<R: Rng + ?Sized>(
    max_layers: usize,
    max_width: usize,
    max_batch: usize,
    activation: Activation,
    rng: &mut R,
) -> Result<ToyInstance> {
    let depth = rng.random_range(1..=max_layers);
    let widths: Vec<usize> = (0..=depth)
        .map(|_| rng.random_range(2..=max_width))
        .collect();
    let batch = rng.random_range(1..=max_batch);
    toy_instance(&widths, batch, activation, LossKind::HalfSquaredError, rng)
}
