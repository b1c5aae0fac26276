//! Envelope brackets on the optimal surrogate loss for homogeneous weights.
//!
//! With every `h_l` squeezed between convex nonincreasing envelopes
//! `h̲ ≤ h_l ≤ h̄` and a common weight `α`, the optimum `p` of the
//! tolerance-allocation problem at budget `b` satisfies
//! `α L ε_lo ≤ p ≤ α L ε_hi` where `L h̲(ε_lo) = b` and `L h̄(ε_hi) = b`
//! (smallest root at flats).

use crate::error::{Error, Result};
use crate::spectrum::EnvelopePair;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Brackets {
    pub eps_lower: f64,
    pub eps_upper: f64,
    /// `α L ε_lo`.
    pub loss_lower: f64,
    /// `α L ε_hi`.
    pub loss_upper: f64,
}

/// `normalizer` converts the normalized envelopes back to parameter counts
/// (`P(k)` of the layers when they share a shape).
pub fn envelope_brackets(
    env: &EnvelopePair,
    layers: usize,
    alpha: f64,
    budget: f64,
    normalizer: f64,
) -> Result<Brackets> {
    if layers == 0 {
        return Err(Error::InvalidArgument(
            "bracket needs at least one layer".into(),
        ));
    }
    if !(normalizer > 0.0 && normalizer.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "normalizer {normalizer} must be positive"
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha {alpha} must be nonnegative"
        )));
    }
    let scale = layers as f64 * normalizer;
    let upper = &env.upper;
    let low = scale * upper.eval(1.0);
    let high = scale * upper.eval(0.0);
    if !(budget >= low && budget <= high) {
        return Err(Error::BudgetOutOfBand { budget, low, high });
    }
    let level = budget / scale;
    let eps_upper = upper
        .generalized_inverse(level)
        .expect("budget within band has an upper root");
    let eps_lower = env
        .lower
        .generalized_inverse(level)
        .ok_or_else(|| Error::InvalidArgument("lower envelope exceeds the upper one".into()))?;
    let l = layers as f64;
    Ok(Brackets {
        eps_lower,
        eps_upper,
        loss_lower: alpha * l * eps_lower,
        loss_upper: alpha * l * eps_upper,
    })
}
