//! Frontier sweep over uniform tolerances.

use std::collections::BTreeMap;

use super::{allocate_uniform, SensitivityWeights};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::spectrum::SpectrumProfile;

#[derive(Debug, Clone, PartialEq)]
pub struct FrontierPoint<T> {
    /// Smallest swept `ε` inducing this rank vector.
    pub eps: T,
    pub total_params: u64,
    /// `Σ_l α_l e_l(r_l)`.
    pub surrogate_loss: T,
    pub ranks: Vec<usize>,
}

/// One point per distinct rank vector induced by the grid, sorted by
/// `total_params` (then by loss).
pub fn pareto_sweep<T: Scalar>(
    profiles: &[SpectrumProfile<T>],
    weights: &SensitivityWeights<T>,
    eps_grid: &[T],
) -> Result<Vec<FrontierPoint<T>>> {
    let mut by_ranks: BTreeMap<Vec<usize>, FrontierPoint<T>> = BTreeMap::new();
    for &eps in eps_grid {
        let alloc = allocate_uniform(profiles, eps)?;
        let ranks = alloc.ranks();
        let loss = alloc.surrogate_loss(weights)?;
        by_ranks
            .entry(ranks.clone())
            .and_modify(|p| {
                if eps < p.eps {
                    p.eps = eps;
                }
            })
            .or_insert(FrontierPoint {
                eps,
                total_params: alloc.total_params,
                surrogate_loss: loss,
                ranks,
            });
    }
    let mut points: Vec<FrontierPoint<T>> = by_ranks.into_values().collect();
    points.sort_by(|a, b| {
        a.total_params
            .cmp(&b.total_params)
            .then(a.surrogate_loss.partial_cmp(&b.surrogate_loss).unwrap())
            .then(a.ranks.cmp(&b.ranks))
    });
    Ok(points)
}
