//! Exact multiple-choice knapsack over per-layer ranks.
//!
//! Minimizes `Σ_l α_l e_l(r_l)` subject to `Σ_l P_l(r_l) ≤ b` with
//! `r_l ∈ {0, …, k_l}`. Parameter costs `r (N_l + M_l)` share the factor
//! `g = gcd_l (N_l + M_l)`, so the table is indexed by `cost / g`.

use super::SensitivityWeights;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::spectrum::SpectrumProfile;

/// Upper limit on `Σ_l k_l`.
pub const MAX_CANDIDATE_RANKS: usize = 2_000;
/// Upper limit on the gcd-reduced budget.
pub const MAX_REDUCED_BUDGET: u64 = 1_000_000;
/// Upper limit on the DP table size, `L × (reduced budget + 1)`.
pub const MAX_DP_CELLS: u64 = 20_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct KnapsackSolution<T> {
    pub objective: T,
    pub ranks: Vec<usize>,
    pub total_params: u64,
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Exact optimum. Ties go to the smaller total parameter count, then to the
/// lexicographically smaller rank vector.
pub fn knapsack_oracle<T: Scalar>(
    profiles: &[SpectrumProfile<T>],
    weights: &SensitivityWeights<T>,
    budget: u64,
) -> Result<KnapsackSolution<T>> {
    let candidates: usize = profiles.iter().map(|p| p.max_rank()).sum();
    if candidates > MAX_CANDIDATE_RANKS {
        return Err(Error::InstanceTooLarge(format!(
            "{candidates} candidate ranks (limit {MAX_CANDIDATE_RANKS})"
        )));
    }
    let alphas = profiles
        .iter()
        .map(|p| weights.get(&p.layer_name))
        .collect::<Result<Vec<T>>>()?;
    if profiles.is_empty() {
        return Ok(KnapsackSolution {
            objective: T::zero(),
            ranks: Vec::new(),
            total_params: 0,
        });
    }

    let step = profiles
        .iter()
        .map(|p| (p.rows + p.cols) as u64)
        .fold(0, gcd);
    let full: u64 = profiles.iter().map(|p| p.param_count(p.max_rank())).sum();
    let cap = (budget.min(full) / step) as usize;
    if cap as u64 > MAX_REDUCED_BUDGET {
        return Err(Error::InstanceTooLarge(format!(
            "reduced budget {cap} (limit {MAX_REDUCED_BUDGET})"
        )));
    }
    let layers = profiles.len();
    let width = cap + 1;
    if (layers as u64) * (width as u64) > MAX_DP_CELLS {
        return Err(Error::InstanceTooLarge(format!(
            "{layers} x {width} table cells (limit {MAX_DP_CELLS})"
        )));
    }

    let costs: Vec<usize> = profiles
        .iter()
        .map(|p| ((p.rows + p.cols) as u64 / step) as usize)
        .collect();
    let values: Vec<Vec<T>> = profiles
        .iter()
        .zip(&alphas)
        .map(|(p, &a)| p.errors().into_iter().map(|e| a * e).collect())
        .collect();

    // suffix[l][c]: best objective of layers l.. using exactly c reduced units.
    let inf = T::infinity();
    let mut suffix = vec![inf; (layers + 1) * width];
    suffix[layers * width] = T::zero();
    for l in (0..layers).rev() {
        let (head, tail) = suffix.split_at_mut((l + 1) * width);
        let cur = &mut head[l * width..];
        let next = &tail[..width];
        for (r, &v) in values[l].iter().enumerate() {
            let w = r * costs[l];
            if w > cap {
                break;
            }
            for c in w..width {
                let rest = next[c - w];
                if rest == inf {
                    continue;
                }
                let cand = v + rest;
                if cand < cur[c] {
                    cur[c] = cand;
                }
            }
        }
    }

    let first = &suffix[..width];
    let mut best_c = 0;
    for c in 1..width {
        if first[c] < first[best_c] {
            best_c = c;
        }
    }
    let objective = first[best_c];

    let mut ranks = Vec::with_capacity(layers);
    let mut c = best_c;
    for l in 0..layers {
        let target = suffix[l * width + c];
        let next = &suffix[(l + 1) * width..(l + 2) * width];
        let r = values[l]
            .iter()
            .enumerate()
            .find(|&(r, &v)| {
                let w = r * costs[l];
                w <= c && next[c - w] != inf && v + next[c - w] == target
            })
            .map(|(r, _)| r)
            .expect("knapsack reconstruction follows a recorded optimum");
        ranks.push(r);
        c -= r * costs[l];
    }
    debug_assert_eq!(c, 0);
    let total_params = profiles
        .iter()
        .zip(&ranks)
        .map(|(p, &r)| p.param_count(r))
        .sum();
    Ok(KnapsackSolution {
        objective,
        ranks,
        total_params,
    })
}
