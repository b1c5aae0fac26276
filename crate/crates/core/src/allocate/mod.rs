//! Rank allocation across layers.
//!
//! A single tolerance `ε` (or one per layer group) maps every layer to its
//! minimal admissible rank; layers with faster-decaying spectra land on
//! lower ranks. A parameter budget is turned into the smallest such `ε` by
//! inverting the aggregate step function `H(ε) = Σ_l h_l(ε)`. The exact
//! knapsack solver and the envelope brackets are there to check how close
//! the uniform rule gets to the true optimum.

mod brackets;
mod knapsack;
mod pareto;

pub use brackets::{envelope_brackets, Brackets};
pub use knapsack::{
    knapsack_oracle, KnapsackSolution, MAX_CANDIDATE_RANKS, MAX_DP_CELLS, MAX_REDUCED_BUDGET,
};
pub use pareto::{pareto_sweep, FrontierPoint};

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectrum::SpectrumProfile;

/// Key used in [`RankAllocation::tolerances`] when one `ε` covers every layer.
pub const ALL_GROUPS: &str = "*";

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRank<T> {
    pub name: String,
    pub group: String,
    pub rank: usize,
    /// `e_l(r_l)`.
    pub error: T,
    /// `P_l(r_l)`.
    pub params: u64,
    /// `N_l M_l`.
    pub dense_params: u64,
}

impl<T: Scalar> LayerRank<T> {
    /// `1 - P_l(r_l) / (N_l M_l)`; negative when the factors outgrow the dense matrix.
    pub fn compression_ratio(&self) -> f64 {
        1.0 - self.params as f64 / self.dense_params as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankAllocation<T> {
    /// One entry per layer, in input order.
    pub layers: Vec<LayerRank<T>>,
    /// Group → `ε` that produced the ranks (`"*"` for a single uniform `ε`).
    pub tolerances: BTreeMap<String, T>,
    /// `S(r) = Σ_l P_l(r_l)`.
    pub total_params: u64,
    /// `Σ_l N_l M_l` over the allocated layers.
    pub dense_params: u64,
    /// `1 - S(r) / dense_params`. Not clamped.
    pub compression_ratio: f64,
}

impl<T: Scalar> RankAllocation<T> {
    /// Builds an allocation from explicit ranks (one per profile).
    pub fn from_ranks(
        profiles: &[SpectrumProfile<T>],
        ranks: &[usize],
        tolerances: BTreeMap<String, T>,
    ) -> Result<Self> {
        if profiles.len() != ranks.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} ranks for {} layers",
                ranks.len(),
                profiles.len()
            )));
        }
        let layers = profiles
            .iter()
            .zip(ranks)
            .map(|(p, &r)| {
                Ok(LayerRank {
                    name: p.layer_name.clone(),
                    group: p.group.clone(),
                    rank: r,
                    error: p.relative_error(r)?,
                    params: p.param_count(r),
                    dense_params: p.dense_params(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let total_params = layers.iter().map(|l| l.params).sum();
        let dense_params: u64 = layers.iter().map(|l| l.dense_params).sum();
        let compression_ratio = if dense_params == 0 {
            0.0
        } else {
            1.0 - total_params as f64 / dense_params as f64
        };
        Ok(Self {
            layers,
            tolerances,
            total_params,
            dense_params,
            compression_ratio,
        })
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.rank).collect()
    }

    pub fn rank_of(&self, name: &str) -> Option<usize> {
        self.layers.iter().find(|l| l.name == name).map(|l| l.rank)
    }

    /// `Σ_l α_l e_l(r_l)`.
    pub fn surrogate_loss(&self, weights: &SensitivityWeights<T>) -> Result<T> {
        self.layers.iter().try_fold(
            T::zero(),
            |acc, l| Ok(acc + weights.get(&l.name)? * l.error),
        )
    }

    pub fn report(&self) -> AllocationReport {
        AllocationReport {
            epsilon: self
                .tolerances
                .iter()
                .map(|(g, e)| (g.clone(), e.as_f64()))
                .collect(),
            per_layer: self
                .layers
                .iter()
                .map(|l| LayerReport {
                    name: l.name.clone(),
                    group: l.group.clone(),
                    rank: l.rank,
                    error: l.error.as_f64(),
                    params: l.params,
                })
                .collect(),
            total_params: self.total_params,
            dense_params: self.dense_params,
            compression_ratio: self.compression_ratio,
        }
    }
}

/// Serialized form of a [`RankAllocation`]. Field order is the key order on disk.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationReport {
    pub epsilon: BTreeMap<String, f64>,
    pub per_layer: Vec<LayerReport>,
    pub total_params: u64,
    pub dense_params: u64,
    pub compression_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerReport {
    pub name: String,
    pub group: String,
    pub rank: usize,
    pub error: f64,
    pub params: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Uniform,
    Supplied,
}

/// Per-layer sensitivity coefficients `α_l` of the surrogate loss `Σ α_l e_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityWeights<T> {
    pub alpha: BTreeMap<String, T>,
    pub mode: WeightMode,
}

impl<T: Scalar> SensitivityWeights<T> {
    /// `α_l ≡ 1` for every profiled layer.
    pub fn uniform(profiles: &[SpectrumProfile<T>]) -> Self {
        Self {
            alpha: profiles
                .iter()
                .map(|p| (p.layer_name.clone(), T::one()))
                .collect(),
            mode: WeightMode::Uniform,
        }
    }

    pub fn supplied(alpha: BTreeMap<String, T>) -> Result<Self> {
        if alpha.values().any(|a| !a.is_finite() || *a < T::zero()) {
            return Err(Error::InvalidArgument(
                "sensitivity weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            alpha,
            mode: WeightMode::Supplied,
        })
    }

    pub fn get(&self, layer: &str) -> Result<T> {
        self.alpha
            .get(layer)
            .copied()
            .ok_or_else(|| Error::MissingWeight(layer.to_string()))
    }
}

fn check_tolerance<T: Scalar>(eps: T) -> Result<()> {
    if !(eps >= T::zero() && eps <= T::one()) {
        return Err(Error::InvalidArgument(format!(
            "tolerance {eps} outside [0, 1]"
        )));
    }
    Ok(())
}

/// Same `ε` for every layer: `r_l = r*_l(ε)`.
pub fn allocate_uniform<T: Scalar>(
    profiles: &[SpectrumProfile<T>],
    eps: T,
) -> Result<RankAllocation<T>> {
    check_tolerance(eps)?;
    let ranks: Vec<usize> = profiles
        .iter()
        .map(|p| p.min_rank_for_tolerance(eps))
        .collect();
    RankAllocation::from_ranks(
        profiles,
        &ranks,
        BTreeMap::from([(ALL_GROUPS.to_string(), eps)]),
    )
}

/// One `ε` per layer group; each layer uses its group's tolerance.
pub fn allocate_clustered<T: Scalar>(
    profiles: &[SpectrumProfile<T>],
    group_tolerances: &BTreeMap<String, T>,
) -> Result<RankAllocation<T>> {
    for eps in group_tolerances.values() {
        check_tolerance(*eps)?;
    }
    let mut used = BTreeMap::new();
    let ranks = profiles
        .iter()
        .map(|p| {
            let eps = *group_tolerances
                .get(&p.group)
                .ok_or_else(|| Error::MissingGroupTolerance(p.group.clone()))?;
            used.insert(p.group.clone(), eps);
            Ok(p.min_rank_for_tolerance(eps))
        })
        .collect::<Result<Vec<_>>>()?;
    RankAllocation::from_ranks(profiles, &ranks, used)
}

/// `H(ε) = Σ_l h_l(ε)`.
pub fn aggregate_params<T: Scalar>(profiles: &[SpectrumProfile<T>], eps: T) -> u64 {
    profiles.iter().map(|p| p.h_mapping(eps)).sum()
}

/// Every tolerance at which some `h_l` can change value: `{0, 1} ∪ {e_l(r)}`,
/// sorted ascending without duplicates.
pub fn tolerance_breakpoints<T: Scalar>(profiles: &[SpectrumProfile<T>]) -> Vec<T> {
    let mut points: Vec<T> = vec![T::zero(), T::one()];
    for p in profiles {
        points.extend(p.errors());
    }
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup();
    points
}

#[derive(Debug, Clone, PartialEq)]
pub struct BudgetSolution<T> {
    pub eps: T,
    pub allocation: RankAllocation<T>,
    /// The budget was larger than `H(0)`; `ε = 0` was returned.
    pub budget_exceeds_full_rank: bool,
}

/// Smallest breakpoint `ε` with `H(ε) ≤ budget`, and the uniform allocation there.
pub fn budget_to_epsilon<T: Scalar>(
    profiles: &[SpectrumProfile<T>],
    budget: u64,
) -> Result<BudgetSolution<T>> {
    let points = tolerance_breakpoints(profiles);
    let full = aggregate_params(profiles, T::zero());
    // H is nonincreasing in ε, so the feasible breakpoints form a suffix.
    let first = points.partition_point(|&eps| aggregate_params(profiles, eps) > budget);
    let eps = points[first.min(points.len() - 1)];
    Ok(BudgetSolution {
        eps,
        allocation: allocate_uniform(profiles, eps)?,
        budget_exceeds_full_rank: budget > full,
    })
}
