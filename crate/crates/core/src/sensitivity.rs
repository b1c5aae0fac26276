//! First-order loss sensitivity of a feed-forward stack `X_{l+1} = σ(W_l X_l)`.
//!
//! For perturbations `ΔW_l` the loss change is bounded by
//! `G Σ_l (Π_{m>l} K_m) c ‖ΔW_l X_l‖_F`, where `G = ‖∇_Y L‖_F`,
//! `K_m` bounds the Jacobian of layer `m` column-wise and `c = sup |σ'|`.
//! Replacing `‖ΔW_l X_l‖_F` with `‖X_l‖_F ‖W_l‖_F e_l` gives the
//! per-layer weights `α_l` used by the surrogate allocation objective.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::allocate::SensitivityWeights;
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::matrix::Matrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-z).exp()),
        }
    }

    pub fn derivative<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::Tanh => {
                let t = z.tanh();
                T::one() - t * t
            }
            Activation::Sigmoid => {
                let s = self.apply(z);
                s * (T::one() - s)
            }
        }
    }

    /// `sup |σ'|`.
    pub fn lipschitz<T: Scalar>(self) -> T {
        match self {
            Activation::Identity | Activation::Tanh => T::one(),
            Activation::Sigmoid => T::lit(0.25),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Loss<T> {
    /// `⟨C, Y⟩`.
    Linear(Matrix<T>),
    /// `½ ‖Y − target‖_F²`.
    HalfSquaredError(Matrix<T>),
}

impl<T: Scalar> Loss<T> {
    fn reference(&self) -> &Matrix<T> {
        match self {
            Loss::Linear(c) | Loss::HalfSquaredError(c) => c,
        }
    }

    fn check(&self, y: &Matrix<T>) -> Result<()> {
        let r = self.reference();
        if r.shape() != y.shape() {
            return Err(Error::ShapeMismatch(format!(
                "loss expects {}x{} output, got {}x{}",
                r.rows(),
                r.cols(),
                y.rows(),
                y.cols()
            )));
        }
        Ok(())
    }

    pub fn value(&self, y: &Matrix<T>) -> Result<T> {
        self.check(y)?;
        Ok(match self {
            Loss::Linear(c) => c.inner(y),
            Loss::HalfSquaredError(t) => T::lit(0.5) * (y - t).frobenius_norm_sq(),
        })
    }

    pub fn gradient(&self, y: &Matrix<T>) -> Result<Matrix<T>> {
        self.check(y)?;
        Ok(match self {
            Loss::Linear(c) => c.clone(),
            Loss::HalfSquaredError(t) => y - t,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork<T> {
    pub layers: Vec<Matrix<T>>,
    pub activation: Activation,
    pub loss: Loss<T>,
}

impl<T: Scalar> ToyNetwork<T> {
    pub fn new(layers: Vec<Matrix<T>>, activation: Activation, loss: Loss<T>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument(
                "network needs at least one layer".into(),
            ));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} has {} inputs but layer {l} has {} outputs",
                    l + 1,
                    pair[1].cols(),
                    pair[0].rows()
                )));
            }
        }
        let out = layers.last().unwrap().rows();
        if loss.reference().rows() != out {
            return Err(Error::ShapeMismatch(format!(
                "loss expects {} outputs, network produces {out}",
                loss.reference().rows()
            )));
        }
        Ok(Self {
            layers,
            activation,
            loss,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    fn check_input(&self, x: &Matrix<T>) -> Result<()> {
        if x.rows() != self.layers[0].cols() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} rows, first layer expects {}",
                x.rows(),
                self.layers[0].cols()
            )));
        }
        Ok(())
    }

    fn check_deltas(&self, deltas: &[Matrix<T>]) -> Result<()> {
        if deltas.len() != self.depth() {
            return Err(Error::ShapeMismatch(format!(
                "{} perturbations for {} layers",
                deltas.len(),
                self.depth()
            )));
        }
        for (l, (d, w)) in deltas.iter().zip(&self.layers).enumerate() {
            if d.shape() != w.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "perturbation {l} is {}x{}, layer is {}x{}",
                    d.rows(),
                    d.cols(),
                    w.rows(),
                    w.cols()
                )));
            }
        }
        Ok(())
    }

    /// Layer inputs `X_1, …, X_L` followed by the output `X_{L+1}`.
    pub fn forward(&self, x: &Matrix<T>) -> Result<Vec<Matrix<T>>> {
        self.check_input(x)?;
        forward_with(&self.layers, self.activation, x)
    }

    pub fn loss_at(&self, x: &Matrix<T>) -> Result<T> {
        let xs = self.forward(x)?;
        self.loss.value(xs.last().unwrap())
    }

    /// `L(W + ΔW) − L(W)`.
    pub fn loss_delta(&self, x: &Matrix<T>, deltas: &[Matrix<T>]) -> Result<T> {
        self.check_deltas(deltas)?;
        let base = self.loss_at(x)?;
        let perturbed: Vec<Matrix<T>> =
            self.layers.iter().zip(deltas).map(|(w, d)| w + d).collect();
        let xs = forward_with(&perturbed, self.activation, x)?;
        Ok(self.loss.value(xs.last().unwrap())? - base)
    }

    /// Bound on `|ΔL|` together with the per-layer weights `α_l`.
    pub fn bound(&self, x: &Matrix<T>, deltas: &[Matrix<T>]) -> Result<SensitivityEstimate<T>> {
        self.check_deltas(deltas)?;
        let mut est = self.estimate(x)?;
        let xs = self.forward(x)?;
        let c = self.activation.lipschitz::<T>();
        est.bound = (0..self.depth())
            .map(|l| est.g * est.downstream[l] * c * deltas[l].matmul(&xs[l]).frobenius_norm())
            .sum();
        Ok(est)
    }

    /// `G`, `K_l` and `α_l` without a specific perturbation (`bound` is 0).
    pub fn estimate(&self, x: &Matrix<T>) -> Result<SensitivityEstimate<T>> {
        let xs = self.forward(x)?;
        let g = self.loss.gradient(xs.last().unwrap())?.frobenius_norm();
        let k = self
            .layers
            .iter()
            .zip(&xs)
            .map(|(w, xl)| jacobian_norm(w, &w.matmul(xl), self.activation))
            .collect::<Result<Vec<T>>>()?;
        let depth = self.depth();
        let mut downstream = vec![T::one(); depth];
        for l in (0..depth.saturating_sub(1)).rev() {
            downstream[l] = downstream[l + 1] * k[l + 1];
        }
        let c = self.activation.lipschitz::<T>();
        let alpha = (0..depth)
            .map(|l| {
                g * downstream[l] * c * xs[l].frobenius_norm() * self.layers[l].frobenius_norm()
            })
            .collect();
        Ok(SensitivityEstimate {
            g,
            k,
            downstream,
            alpha,
            bound: T::zero(),
        })
    }

    /// `α_l` keyed by `names` (one per layer) for the weighted allocation.
    pub fn alpha_weights(&self, x: &Matrix<T>, names: &[String]) -> Result<SensitivityWeights<T>> {
        self.estimate(x)?.weights(names)
    }
}

fn forward_with<T: Scalar>(
    layers: &[Matrix<T>],
    activation: Activation,
    x: &Matrix<T>,
) -> Result<Vec<Matrix<T>>> {
    let mut xs = Vec::with_capacity(layers.len() + 1);
    xs.push(x.clone());
    for w in layers {
        let z = w.matmul(xs.last().unwrap());
        xs.push(z.map(|v| activation.apply(v)));
    }
    Ok(xs)
}

/// `max_i ‖diag(σ'(z_i)) W‖₂` over the columns `z_i` of `z = W X`.
pub fn jacobian_norm<T: Scalar>(w: &Matrix<T>, z: &Matrix<T>, activation: Activation) -> Result<T> {
    if z.rows() != w.rows() {
        return Err(Error::ShapeMismatch(format!(
            "preactivation has {} rows, weight has {}",
            z.rows(),
            w.rows()
        )));
    }
    if activation == Activation::Identity || z.cols() == 0 {
        return spectral_norm(w);
    }
    let mut best = T::zero();
    for i in 0..z.cols() {
        let d: Vec<T> = z
            .column(i)
            .into_iter()
            .map(|v| activation.derivative(v))
            .collect();
        best = best.max(spectral_norm(&w.scale_rows(&d))?);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityEstimate<T> {
    /// `‖∇_Y L‖_F`.
    pub g: T,
    /// Per-layer Jacobian bounds `K_l`.
    pub k: Vec<T>,
    /// `Π_{m>l} K_m`.
    pub downstream: Vec<T>,
    pub alpha: Vec<T>,
    pub bound: T,
}

impl<T: Scalar> SensitivityEstimate<T> {
    /// Pairs `α_l` with layer names as supplied surrogate weights.
    pub fn weights(&self, names: &[String]) -> Result<SensitivityWeights<T>> {
        if names.len() != self.alpha.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} names for {} layers",
                names.len(),
                self.alpha.len()
            )));
        }
        let map: BTreeMap<String, T> = names
            .iter()
            .cloned()
            .zip(self.alpha.iter().copied())
            .collect();
        SensitivityWeights::supplied(map)
    }
}

/// Slack allowed on `|ΔL| / bound` at scale `t`: `1 + 50 t`.
pub fn bound_tolerance(t: f64) -> f64 {
    1.0 + 50.0 * t
}

/// One scale of a bound check along a fixed direction.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundCheck {
    pub t: f64,
    pub delta_l: f64,
    pub bound: f64,
    /// `|ΔL| / bound`; `None` when the bound is zero.
    pub ratio: Option<f64>,
    pub pass: bool,
}

/// Evaluates `ΔL` and the bound for perturbations `t · direction`.
pub fn check_bound(
    net: &ToyNetwork<f64>,
    x: &Matrix<f64>,
    direction: &[Matrix<f64>],
    scales: &[f64],
) -> Result<Vec<BoundCheck>> {
    net.check_deltas(direction)?;
    scales
        .iter()
        .map(|&t| {
            let deltas: Vec<Matrix<f64>> = direction.iter().map(|d| d.scale(t)).collect();
            let delta_l = net.loss_delta(x, &deltas)?;
            let bound = net.bound(x, &deltas)?.bound;
            let (ratio, pass) = if bound > 0.0 {
                let ratio = delta_l.abs() / bound;
                (Some(ratio), ratio <= bound_tolerance(t))
            } else {
                (None, delta_l == 0.0)
            };
            Ok(BoundCheck {
                t,
                delta_l,
                bound,
                ratio,
                pass,
            })
        })
        .collect()
}
