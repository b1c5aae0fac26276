use std::collections::BTreeMap;

use lowrank_core::allocate::{
    allocate_uniform, budget_to_epsilon, knapsack_oracle, pareto_sweep, SensitivityWeights,
};
use lowrank_core::factorize::{als_factorize, objective, svd_factorize, AlsOptions, TRACE_SLACK};
use lowrank_core::linalg::{cholesky, pinv, svd, symmetric_eigen};
use lowrank_core::sensitivity::{jacobian_norm, Activation};
use lowrank_core::spectrum::{envelope, normalized_curve, SpectrumProfile};
use lowrank_core::synthetic::{
    gaussian_matrix, random_toy_instance, rank_deficient_covariance, seeded_rng,
    well_conditioned_covariance,
};
use lowrank_core::tensorio::{read_container, write_container, Dtype, WeightTensor};
use lowrank_core::{Matrix, Matrix32};
use proptest::prelude::*;
use rand::Rng;

fn random_profile(seed: u64, max_dim: usize) -> SpectrumProfile<f64> {
    let mut rng = seeded_rng(seed);
    let n = rng.random_range(1..=max_dim);
    let m = rng.random_range(1..=max_dim);
    let w = gaussian_matrix(n, m, &mut rng);
    SpectrumProfile::from_matrix("w", "g", &w).unwrap()
}

fn random_profiles(seed: u64, layers: usize, max_dim: usize) -> Vec<SpectrumProfile<f64>> {
    (0..layers)
        .map(|l| {
            let mut p = random_profile(seed.wrapping_mul(31).wrapping_add(l as u64), max_dim);
            p.layer_name = format!("l{l}");
            p
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_reconstructs_and_is_orthonormal(seed in any::<u64>(), n in 1usize..20, m in 1usize..20) {
        let mut rng = seeded_rng(seed);
        let w = gaussian_matrix(n, m, &mut rng);
        let s = svd(&w).unwrap();
        let k = n.min(m);
        prop_assert!(s.sigma.windows(2).all(|p| p[0] >= p[1]));
        prop_assert!((&s.reconstruct(k) - &w).frobenius_norm() <= 1e-12 * w.frobenius_norm().max(1.0));
        prop_assert!(s.u.t_matmul(&s.u).max_abs_diff(&Matrix::identity(k)) <= 1e-12);
        prop_assert!(s.vt.matmul_t(&s.vt).max_abs_diff(&Matrix::identity(k)) <= 1e-12);
    }

    #[test]
    fn svd_of_rank_deficient_products(seed in any::<u64>(), n in 2usize..16, m in 2usize..16, r in 1usize..4) {
        let mut rng = seeded_rng(seed);
        let w = gaussian_matrix(n, r, &mut rng).matmul(&gaussian_matrix(r, m, &mut rng));
        let s = svd(&w).unwrap();
        let k = n.min(m);
        prop_assert!(s.u.t_matmul(&s.u).max_abs_diff(&Matrix::identity(k)) <= 1e-10);
        prop_assert!((&s.reconstruct(k) - &w).frobenius_norm() <= 1e-10 * w.frobenius_norm());
    }

    #[test]
    fn eigen_and_pinv_identities(seed in any::<u64>(), n in 1usize..12, samples in 1usize..16) {
        let mut rng = seeded_rng(seed);
        let x = gaussian_matrix(n, samples, &mut rng);
        let s = x.matmul_t(&x);
        let (values, vectors) = symmetric_eigen(&s).unwrap();
        let rebuilt = vectors.scale_columns(&values).matmul_t(&vectors);
        let scale = s.max_abs().max(1.0);
        prop_assert!(rebuilt.max_abs_diff(&s) <= 1e-11 * scale);
        let p = pinv(&s, 1e-10).unwrap();
        prop_assert!(s.matmul(&p).matmul(&s).max_abs_diff(&s) <= 1e-9 * scale);
        if samples >= n {
            let l = cholesky(&s).unwrap();
            prop_assert!(l.matmul_t(&l).max_abs_diff(&s) <= 1e-11 * scale);
        }
    }

    #[test]
    fn relative_error_bounds_and_monotonicity(seed in any::<u64>()) {
        let p = random_profile(seed, 12);
        let e = p.errors();
        prop_assert_eq!(e[0], 1.0);
        prop_assert!(e[p.max_rank()] <= 1e-7);
        prop_assert!(e.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(e.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn min_rank_is_minimal_and_monotone(seed in any::<u64>(), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let p = random_profile(seed, 12);
        let e = p.errors();
        for eps in [a, b] {
            let r = p.min_rank_for_tolerance(eps);
            prop_assert!(e[r] <= eps || r == p.numerical_rank());
            if r > 0 {
                prop_assert!(e[r - 1] > eps);
            }
        }
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(p.min_rank_for_tolerance(hi) <= p.min_rank_for_tolerance(lo));
    }

    #[test]
    fn uniform_allocation_totals_add_up(seed in any::<u64>(), eps in 0.0f64..=1.0) {
        let profiles = random_profiles(seed, 4, 10);
        let alloc = allocate_uniform(&profiles, eps).unwrap();
        let sum: u64 = alloc.layers.iter().map(|l| l.params).sum();
        prop_assert_eq!(alloc.total_params, sum);
        for (l, p) in alloc.layers.iter().zip(&profiles) {
            prop_assert!(l.error <= eps || l.rank == p.numerical_rank());
        }
        let report = alloc.report();
        prop_assert_eq!(report.per_layer.iter().map(|l| l.params).sum::<u64>(), report.total_params);
    }

    #[test]
    fn budget_inversion_is_feasible_and_tight(seed in any::<u64>(), frac in 0.0f64..1.2) {
        let profiles = random_profiles(seed, 3, 8);
        let full: u64 = profiles.iter().map(|p| p.param_count(p.max_rank())).sum();
        let budget = (frac * full as f64) as u64;
        let sol = budget_to_epsilon(&profiles, budget).unwrap();
        let total = sol.allocation.total_params;
        prop_assert!(total <= budget || sol.eps == 1.0);
        // No smaller tolerance breakpoint is feasible.
        for p in &profiles {
            for e in p.errors() {
                if e < sol.eps {
                    prop_assert!(lowrank_core::allocate::aggregate_params(&profiles, e) > budget);
                }
            }
        }
    }

    #[test]
    fn knapsack_never_worse_than_uniform(seed in any::<u64>(), eps in 0.0f64..=1.0) {
        let profiles = random_profiles(seed, 3, 8);
        let w = SensitivityWeights::uniform(&profiles);
        let alloc = allocate_uniform(&profiles, eps).unwrap();
        let exact = knapsack_oracle(&profiles, &w, alloc.total_params).unwrap();
        prop_assert!(exact.total_params <= alloc.total_params);
        prop_assert!(exact.objective <= alloc.surrogate_loss(&w).unwrap() + 1e-12);
    }

    #[test]
    fn pareto_sweep_is_sorted_and_nondominated(seed in any::<u64>()) {
        let profiles = random_profiles(seed, 4, 8);
        let w = SensitivityWeights::uniform(&profiles);
        let grid: Vec<f64> = (0..=32).map(|i| i as f64 / 32.0).collect();
        let f = pareto_sweep(&profiles, &w, &grid).unwrap();
        prop_assert!(f.windows(2).all(|p| p[0].total_params <= p[1].total_params));
        for a in &f {
            for b in &f {
                let dominates = b.total_params <= a.total_params
                    && b.surrogate_loss <= a.surrogate_loss
                    && (b.total_params < a.total_params || b.surrogate_loss < a.surrogate_loss);
                prop_assert!(!dominates);
            }
        }
    }

    #[test]
    fn envelope_contains_retained_curves(seed in any::<u64>(), layers in 1usize..12, trim in 0.0f64..0.3) {
        let mut rng = seeded_rng(seed);
        let profiles: Vec<_> = (0..layers)
            .map(|l| {
                let w = gaussian_matrix(6, 6, &mut rng).scale_columns(
                    &(1..=6).map(|i| (i as f64).powf(-rng.random_range(0.0..2.0))).collect::<Vec<_>>(),
                );
                SpectrumProfile::from_matrix(format!("l{l}"), "g", &w).unwrap()
            })
            .collect();
        let env = envelope(&profiles, trim).unwrap();
        prop_assert!(env.lower.is_convex(1e-12) && env.upper.is_convex(1e-12));
        prop_assert!(env.lower.is_nonincreasing(1e-12) && env.upper.is_nonincreasing(1e-12));
        let grid = env.lower.xs.clone();
        for &l in &env.retained {
            for (i, h) in normalized_curve(&profiles[l], &grid).into_iter().enumerate() {
                prop_assert!(env.lower.ys[i] <= h + 1e-12);
                prop_assert!(h <= env.upper.ys[i] + 1e-12);
            }
        }
        let expected = layers - (trim * layers as f64).floor() as usize;
        prop_assert_eq!(env.retained.len(), expected);
    }

    #[test]
    fn balanced_split_gauge(seed in any::<u64>(), n in 1usize..12, m in 1usize..12) {
        let mut rng = seeded_rng(seed);
        let w = gaussian_matrix(n, m, &mut rng);
        let r = rng.random_range(0..=n.min(m));
        let f = svd_factorize(&w, r).unwrap();
        prop_assert!((f.a.frobenius_norm() - f.b.frobenius_norm()).abs() <= 1e-12 * w.frobenius_norm());
    }

    #[test]
    fn tensor_container_round_trip(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = seeded_rng(seed);
        let a = gaussian_matrix(n, m, &mut rng);
        let b = gaussian_matrix(m, n, &mut rng);
        let tensors = vec![
            WeightTensor::new("a", "g0", a.clone()),
            WeightTensor::new("b", "g1", b).with_dtype(Dtype::F32),
        ];
        let dir = tempfile::tempdir().unwrap();
        write_container(&tensors, dir.path()).unwrap();
        let back = read_container(dir.path()).unwrap();
        prop_assert_eq!(&back[0], &tensors[0]);
        let narrowed: Matrix32 = tensors[1].matrix.cast();
        prop_assert_eq!(back[1].matrix.clone(), narrowed.cast::<f64>());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn als_trace_is_nonincreasing(
        seed in any::<u64>(),
        rows in 2usize..=32,
        cols in 2usize..=32,
        deficient in any::<bool>(),
    ) {
        let mut rng = seeded_rng(seed);
        let w = gaussian_matrix(rows, cols, &mut rng);
        let r = rng.random_range(1..=rows.min(cols).min(8));
        let cov = if deficient {
            let samples = rng.random_range(1..cols);
            rank_deficient_covariance(cols, samples, &mut rng)
        } else {
            well_conditioned_covariance(cols, &mut rng)
        };
        let (f, trace) = als_factorize(&w, &cov, r, 10, &AlsOptions::default()).unwrap();
        prop_assert_eq!(trace.values.len(), 11);
        prop_assert!(trace.values.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!(trace.is_nonincreasing(TRACE_SLACK));
        let last = objective(&w, &f.a, &f.b, &cov).unwrap();
        prop_assert!((last - trace.last().unwrap()).abs() <= 1e-12 * last.max(1.0));
    }

    #[test]
    fn jacobian_norm_matches_column_loop(seed in any::<u64>(), n in 1usize..10, m in 1usize..10, batch in 1usize..8) {
        let mut rng = seeded_rng(seed);
        let w = gaussian_matrix(n, m, &mut rng);
        let z = w.matmul(&gaussian_matrix(m, batch, &mut rng));
        for act in [Activation::Identity, Activation::Tanh, Activation::Sigmoid] {
            let got = jacobian_norm(&w, &z, act).unwrap();
            let mut best = 0.0f64;
            for i in 0..batch {
                let j = Matrix::from_fn(n, m, |a, b| act.derivative(z[(a, i)]) * w[(a, b)]);
                best = best.max(svd(&j).unwrap().sigma[0]);
            }
            prop_assert!((got - best).abs() <= 1e-12 * best.max(1.0));
        }
    }

    #[test]
    fn bound_is_positively_homogeneous(seed in any::<u64>(), t in 1e-3f64..10.0) {
        let mut rng = seeded_rng(seed);
        let inst = random_toy_instance(4, 8, 6, Activation::Tanh, &mut rng).unwrap();
        let net = &inst.network;
        let scaled: Vec<Matrix<f64>> = inst.direction.iter().map(|d| d.scale(t)).collect();
        let b1 = net.bound(&inst.input, &inst.direction).unwrap().bound;
        let bt = net.bound(&inst.input, &scaled).unwrap().bound;
        prop_assert!((bt - t * b1).abs() <= 1e-12 * (t * b1).max(1e-300));
        let zeros: Vec<Matrix<f64>> =
            net.layers.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect();
        prop_assert_eq!(net.loss_delta(&inst.input, &zeros).unwrap(), 0.0);
        let est = net.estimate(&inst.input).unwrap();
        prop_assert!(est.g >= 0.0 && est.k.iter().all(|k| *k >= 0.0) && est.alpha.iter().all(|a| *a >= 0.0));
    }
}

#[test]
fn f32_pipeline_instantiates() {
    let mut rng = seeded_rng(99);
    let w: Matrix32 = gaussian_matrix(6, 5, &mut rng).cast();
    let s = svd(&w).unwrap();
    let rebuilt = s.reconstruct(5);
    assert!((&rebuilt - &w).frobenius_norm() <= 1e-5 * w.frobenius_norm());
    let p = SpectrumProfile::<f32>::from_matrix("w", "g", &w).unwrap();
    assert_eq!(p.min_rank_for_tolerance(0.0), 5);
    let names = BTreeMap::from([("w".to_string(), 1.0f32)]);
    let weights = SensitivityWeights::supplied(names).unwrap();
    let sol = knapsack_oracle(std::slice::from_ref(&p), &weights, 22).unwrap();
    assert_eq!(sol.ranks, vec![2]);
}
