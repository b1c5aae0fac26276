use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use lowrank_core::allocate::{
    allocate_clustered, allocate_uniform, budget_to_epsilon, pareto_sweep, AllocationReport,
    RankAllocation, SensitivityWeights,
};
use lowrank_core::factorize::{compress_layer, AlsOptions, LayerResult};
use lowrank_core::sensitivity::{bound_tolerance, check_bound, Activation, Loss, ToyNetwork};
use lowrank_core::spectrum::{envelope, profile, SpectrumProfile};
use lowrank_core::synthetic::{
    gaussian_matrix, generate_calibration, generate_model, mixed_spectra_spec, seeded_rng,
    toy_instance, LayerSpec,
};
use lowrank_core::tensorio::{
    read_calibration, read_container, write_calibration, write_container, Covariance, WeightTensor,
};
use lowrank_core::Matrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ConfigEcho, Perturbation, RunConfig, ToleranceSpec, ToySpec};
use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, file_stem, write_csv, write_json};

pub const ALLOCATION_FILE: &str = "allocation.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRACES_FILE: &str = "traces.csv";
pub const TIMINGS_FILE: &str = "timings.json";
pub const FACTORS_DIR: &str = "factors";
pub const FRONTIER_FILE: &str = "frontier.csv";
pub const ENVELOPE_FILE: &str = "envelope.csv";
pub const PROFILES_DIR: &str = "profiles";
pub const PROFILE_SUMMARY_FILE: &str = "profile_summary.json";
pub const VERIFY_FILE: &str = "verify_bound.json";

fn pool(jobs: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::config(format!("cannot start {jobs} worker threads: {e}")))
}

fn load_model(cfg: &RunConfig) -> CliResult<Vec<WeightTensor>> {
    let tensors = read_container(cfg.model_path()?)?;
    for t in &tensors {
        t.check_layer()?;
    }
    Ok(tensors)
}

fn profile_all(
    tensors: &[WeightTensor],
    pool: &rayon::ThreadPool,
) -> CliResult<Vec<SpectrumProfile<f64>>> {
    let out = pool.install(|| {
        tensors
            .par_iter()
            .map(profile)
            .collect::<lowrank_core::Result<Vec<_>>>()
    })?;
    Ok(out)
}

/// Allocation plus how it was reached.
struct Resolved {
    allocation: RankAllocation<f64>,
    budget: Option<BudgetInfo>,
}

#[derive(Debug, Clone, Serialize)]
struct BudgetInfo {
    target_ratio: f64,
    budget: u64,
    eps: f64,
    budget_exceeds_full_rank: bool,
}

fn resolve_allocation(cfg: &RunConfig, profiles: &[SpectrumProfile<f64>]) -> CliResult<Resolved> {
    Ok(match cfg.tolerance()? {
        ToleranceSpec::Uniform(eps) => Resolved {
            allocation: allocate_uniform(profiles, *eps)?,
            budget: None,
        },
        ToleranceSpec::Groups(groups) => Resolved {
            allocation: allocate_clustered(profiles, groups)?,
            budget: None,
        },
        ToleranceSpec::TargetRatio(ratio) => {
            let dense: u64 = profiles.iter().map(|p| p.dense_params()).sum();
            let budget = ((1.0 - ratio) * dense as f64).floor() as u64;
            let sol = budget_to_epsilon(profiles, budget)?;
            Resolved {
                budget: Some(BudgetInfo {
                    target_ratio: *ratio,
                    budget,
                    eps: sol.eps,
                    budget_exceeds_full_rank: sol.budget_exceeds_full_rank,
                }),
                allocation: sol.allocation,
            }
        }
    })
}

/// Unique file stems for layer names, in input order.
fn layer_files(names: &[&str]) -> Vec<String> {
    let mut used = HashSet::new();
    names
        .iter()
        .map(|name| {
            let base = file_stem(name);
            let mut stem = base.clone();
            let mut n = 2;
            while !used.insert(stem.clone()) {
                stem = format!("{base}-{n}");
                n += 1;
            }
            format!("{stem}.csv")
        })
        .collect()
}

#[derive(Serialize)]
struct ProfileSummary {
    trim: f64,
    coverage_fraction: f64,
    layers: Vec<ProfileSummaryRow>,
}

#[derive(Serialize)]
struct ProfileSummaryRow {
    name: String,
    group: String,
    rows: usize,
    cols: usize,
    max_rank: usize,
    numerical_rank: usize,
    total_energy: f64,
    degenerate: bool,
    retained: bool,
    file: String,
}

#[derive(Serialize)]
struct EnvelopeRow {
    eps: f64,
    lower: f64,
    upper: f64,
}

pub fn cmd_profile(cfg: &RunConfig) -> CliResult<()> {
    let tensors = load_model(cfg)?;
    let profiles = profile_all(&tensors, &pool(cfg.jobs)?)?;
    let dir = cfg.out.join(PROFILES_DIR);
    ensure_dir(&dir)?;
    let names: Vec<&str> = profiles.iter().map(|p| p.layer_name.as_str()).collect();
    let files = layer_files(&names);
    for (p, file) in profiles.iter().zip(&files) {
        write_csv(&dir.join(file), p.table())?;
        if p.is_degenerate() {
            eprintln!(
                "warning: layer `{}` is all zeros (degenerate profile)",
                p.layer_name
            );
        }
    }

    let (coverage_fraction, retained) = if profiles.is_empty() {
        (0.0, Vec::new())
    } else {
        let env = envelope(&profiles, cfg.trim)?;
        write_csv(
            &cfg.out.join(ENVELOPE_FILE),
            env.lower
                .xs
                .iter()
                .enumerate()
                .map(|(i, &eps)| EnvelopeRow {
                    eps,
                    lower: env.lower.ys[i],
                    upper: env.upper.ys[i],
                }),
        )?;
        (env.coverage_fraction, env.retained)
    };
    let summary = ProfileSummary {
        trim: cfg.trim,
        coverage_fraction,
        layers: profiles
            .iter()
            .zip(&files)
            .enumerate()
            .map(|(i, (p, file))| ProfileSummaryRow {
                name: p.layer_name.clone(),
                group: p.group.clone(),
                rows: p.rows,
                cols: p.cols,
                max_rank: p.max_rank(),
                numerical_rank: p.numerical_rank(),
                total_energy: p.total_energy,
                degenerate: p.is_degenerate(),
                retained: retained.contains(&i),
                file: format!("{PROFILES_DIR}/{file}"),
            })
            .collect(),
    };
    write_json(&cfg.out.join(PROFILE_SUMMARY_FILE), &summary)?;
    println!(
        "profiled {} layers; envelope keeps {:.0}% at trim {}",
        profiles.len(),
        100.0 * coverage_fraction,
        cfg.trim
    );
    Ok(())
}

#[derive(Serialize)]
struct AllocationFile {
    config: ConfigEcho,
    #[serde(skip_serializing_if = "Option::is_none")]
    budget: Option<BudgetInfo>,
    allocation: AllocationReport,
}

pub fn cmd_allocate(cfg: &RunConfig) -> CliResult<()> {
    let tensors = load_model(cfg)?;
    let profiles = profile_all(&tensors, &pool(cfg.jobs)?)?;
    let resolved = resolve_allocation(cfg, &profiles)?;
    ensure_dir(&cfg.out)?;
    let report = resolved.allocation.report();
    println!(
        "{} layers: {} of {} parameters (compression ratio {:.4})",
        report.per_layer.len(),
        report.total_params,
        report.dense_params,
        report.compression_ratio
    );
    write_json(
        &cfg.out.join(ALLOCATION_FILE),
        &AllocationFile {
            config: cfg.echo(),
            budget: resolved.budget,
            allocation: report,
        },
    )
}

#[derive(Serialize)]
pub struct LayerRow {
    pub name: String,
    pub group: String,
    pub rank: usize,
    pub error: f64,
    pub params: u64,
    pub objective_init: f64,
    pub objective_final: f64,
    pub iterations_run: usize,
}

#[derive(Serialize)]
pub struct Totals {
    pub total_params: u64,
    pub dense_params: u64,
    pub compression_ratio: f64,
}

#[derive(Serialize)]
struct CompressionReport {
    config: ConfigEcho,
    /// How `dense_params` is counted.
    denominator: &'static str,
    epsilon: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    budget: Option<BudgetInfo>,
    layers: Vec<LayerRow>,
    totals: Totals,
    timings_file: &'static str,
}

#[derive(Serialize)]
struct TraceRow<'a> {
    layer: &'a str,
    iteration: usize,
    objective: f64,
}

#[derive(Serialize)]
struct Timings {
    jobs: usize,
    load_ms: f64,
    profile_ms: f64,
    factorize_ms: f64,
    layers: Vec<LayerTiming>,
}

#[derive(Serialize)]
struct LayerTiming {
    name: String,
    ms: f64,
}

fn load_covariances(cfg: &RunConfig) -> CliResult<BTreeMap<String, Covariance<f64>>> {
    if !cfg.method.needs_covariance() {
        return Ok(BTreeMap::new());
    }
    let path = cfg.calib.as_deref().ok_or_else(|| {
        CliError::config(format!(
            "method `{}` needs calibration data (--calib)",
            cfg.method
        ))
    })?;
    read_calibration(path)?
        .into_iter()
        .map(|r| Ok((r.layer_name.clone(), r.into_covariance()?)))
        .collect()
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

pub fn cmd_compress(cfg: &RunConfig) -> CliResult<()> {
    let started = Instant::now();
    let tensors = load_model(cfg)?;
    let covariances = load_covariances(cfg)?;
    let load_ms = elapsed_ms(started);

    let workers = pool(cfg.jobs)?;
    let t = Instant::now();
    let profiles = profile_all(&tensors, &workers)?;
    let profile_ms = elapsed_ms(t);
    let resolved = resolve_allocation(cfg, &profiles)?;
    let alloc = &resolved.allocation;

    let options = AlsOptions {
        early_stop: cfg.early_stop,
        ..AlsOptions::default()
    };
    let t = Instant::now();
    let results: Vec<(LayerResult<f64>, f64)> = workers.install(|| {
        tensors
            .par_iter()
            .map(|tensor| {
                let start = Instant::now();
                let rank = alloc
                    .rank_of(&tensor.name)
                    .expect("every profiled layer is allocated");
                let res = compress_layer(
                    tensor,
                    covariances.get(&tensor.name),
                    rank,
                    cfg.method,
                    cfg.tau,
                    &options,
                )?;
                Ok((res, elapsed_ms(start)))
            })
            .collect::<lowrank_core::Result<Vec<_>>>()
    })?;
    let factorize_ms = elapsed_ms(t);

    ensure_dir(&cfg.out)?;
    let mut factor_entries = Vec::with_capacity(2 * results.len());
    for ((res, _), tensor) in results.iter().zip(&tensors) {
        let f = &res.factors;
        factor_entries.push(WeightTensor::new(
            format!("{}.A", f.layer_name),
            &tensor.group,
            f.a.clone(),
        ));
        factor_entries.push(WeightTensor::new(
            format!("{}.B", f.layer_name),
            &tensor.group,
            f.b.clone(),
        ));
    }
    write_container(&factor_entries, &cfg.out.join(FACTORS_DIR))?;

    let layers: Vec<LayerRow> = results
        .iter()
        .zip(&alloc.layers)
        .map(|((res, _), l)| LayerRow {
            name: l.name.clone(),
            group: l.group.clone(),
            rank: l.rank,
            error: l.error,
            params: l.params,
            objective_init: res.objective_init,
            objective_final: res.objective_final,
            iterations_run: res.factors.iterations_run,
        })
        .collect();
    let report = CompressionReport {
        config: cfg.echo(),
        denominator: "sum of rows x cols over every layer in the model container",
        epsilon: alloc.tolerances.clone(),
        budget: resolved.budget,
        totals: Totals {
            total_params: layers.iter().map(|l| l.params).sum(),
            dense_params: alloc.dense_params,
            compression_ratio: alloc.compression_ratio,
        },
        layers,
        timings_file: TIMINGS_FILE,
    };
    write_json(&cfg.out.join(REPORT_FILE), &report)?;
    write_csv(
        &cfg.out.join(TRACES_FILE),
        results.iter().flat_map(|(res, _)| {
            res.trace.values.iter().enumerate().map(|(i, &v)| TraceRow {
                layer: &res.factors.layer_name,
                iteration: i,
                objective: v,
            })
        }),
    )?;
    write_json(
        &cfg.out.join(TIMINGS_FILE),
        &Timings {
            jobs: cfg.jobs,
            load_ms,
            profile_ms,
            factorize_ms,
            layers: results
                .iter()
                .map(|(res, ms)| LayerTiming {
                    name: res.factors.layer_name.clone(),
                    ms: *ms,
                })
                .collect(),
        },
    )?;
    println!(
        "compressed {} layers with {}: {} of {} parameters (compression ratio {:.4})",
        report.layers.len(),
        cfg.method,
        report.totals.total_params,
        report.totals.dense_params,
        report.totals.compression_ratio
    );
    Ok(())
}

#[derive(Serialize)]
struct FrontierRow {
    eps: f64,
    total_params: u64,
    surrogate_loss: f64,
}

pub fn cmd_sweep(cfg: &RunConfig) -> CliResult<()> {
    let tensors = load_model(cfg)?;
    let profiles = profile_all(&tensors, &pool(cfg.jobs)?)?;
    let grid = cfg.eps_grid.clone().unwrap_or_else(|| {
        let n = crate::config::DEFAULT_SWEEP_POINTS;
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    });
    let weights = SensitivityWeights::uniform(&profiles);
    let frontier = pareto_sweep(&profiles, &weights, &grid)?;
    ensure_dir(&cfg.out)?;
    write_csv(
        &cfg.out.join(FRONTIER_FILE),
        frontier.iter().map(|p| FrontierRow {
            eps: p.eps,
            total_params: p.total_params,
            surrogate_loss: p.surrogate_loss,
        }),
    )?;
    println!(
        "{} frontier points from {} tolerances",
        frontier.len(),
        grid.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct BoundRow {
    t: f64,
    #[serde(rename = "delta_L")]
    delta_l: f64,
    bound: f64,
    ratio: Option<f64>,
    tolerance: f64,
    pass: bool,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    seed: u64,
    toy: &'a ToySpec,
    pass: bool,
    checks: Vec<BoundRow>,
}

/// Network, input batch and one perturbation direction per layer.
type Toy = (ToyNetwork<f64>, Matrix<f64>, Vec<Matrix<f64>>);

fn build_toy(spec: &ToySpec, seed: u64) -> CliResult<Toy> {
    let mut rng = seeded_rng(seed);
    match spec.perturbation {
        Perturbation::Aligned => {
            let (n_in, n_out) = (spec.widths[0], spec.widths[1]);
            let w = gaussian_matrix(n_out, n_in, &mut rng);
            let x = gaussian_matrix(n_in, spec.batch, &mut rng);
            let d = gaussian_matrix(n_out, n_in, &mut rng);
            let net = ToyNetwork::new(vec![w], Activation::Identity, Loss::Linear(d.matmul(&x)))?;
            Ok((net, x, vec![d]))
        }
        Perturbation::Random | Perturbation::Zero => {
            let inst = toy_instance(
                &spec.widths,
                spec.batch,
                spec.activation,
                spec.loss,
                &mut rng,
            )?;
            let direction = if spec.perturbation == Perturbation::Zero {
                inst.direction
                    .iter()
                    .map(|d| Matrix::zeros(d.rows(), d.cols()))
                    .collect()
            } else {
                inst.direction
            };
            Ok((inst.network, inst.input, direction))
        }
    }
}

pub fn cmd_verify_bound(cfg: &RunConfig) -> CliResult<()> {
    let (net, x, direction) = build_toy(&cfg.toy, cfg.seed)?;
    let checks = check_bound(&net, &x, &direction, &cfg.toy.scales)?;
    let rows: Vec<BoundRow> = checks
        .into_iter()
        .map(|c| BoundRow {
            tolerance: bound_tolerance(c.t),
            t: c.t,
            delta_l: c.delta_l,
            bound: c.bound,
            ratio: c.ratio,
            pass: c.pass,
        })
        .collect();
    for r in &rows {
        let ratio = r
            .ratio
            .map_or("undefined".to_string(), |v| format!("{v:.6}"));
        println!(
            "t={:e} |dL|={:.6e} bound={:.6e} ratio={} (limit {:.4}) {}",
            r.t,
            r.delta_l.abs(),
            r.bound,
            ratio,
            r.tolerance,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let pass = rows.iter().all(|r| r.pass);
    ensure_dir(&cfg.out)?;
    write_json(
        &cfg.out.join(VERIFY_FILE),
        &VerifyReport {
            seed: cfg.seed,
            toy: &cfg.toy,
            pass,
            checks: rows,
        },
    )?;
    if !pass {
        return Err(CliError::Verification(
            "loss change exceeds the first-order bound beyond tolerance".into(),
        ));
    }
    Ok(())
}

#[derive(Serialize)]
struct SyntheticManifest<'a> {
    seed: u64,
    samples: usize,
    rank_deficient_calibration: bool,
    layers: Vec<SyntheticLayerRow<'a>>,
}

#[derive(Serialize)]
struct SyntheticLayerRow<'a> {
    #[serde(flatten)]
    spec: &'a LayerSpec,
    singular_values: Vec<f64>,
}

pub fn cmd_gen_synthetic(cfg: &RunConfig) -> CliResult<()> {
    let all = mixed_spectra_spec();
    let count = cfg.layers.unwrap_or(all.len());
    if count == 0 || count > all.len() {
        return Err(CliError::config(format!(
            "layers must be between 1 and {}",
            all.len()
        )));
    }
    let specs = &all[..count];
    let tensors = generate_model(specs, cfg.seed);
    let calib = generate_calibration(&tensors, cfg.samples, cfg.seed.wrapping_add(1));
    ensure_dir(&cfg.out)?;
    write_container(&tensors, &cfg.out.join("model"))?;
    write_calibration(&calib, &cfg.out.join("calib"))?;
    let deficient = specs.iter().any(|s| cfg.samples < s.cols);
    write_json(
        &cfg.out.join("synthetic.json"),
        &SyntheticManifest {
            seed: cfg.seed,
            samples: cfg.samples,
            rank_deficient_calibration: deficient,
            layers: specs
                .iter()
                .map(|s| SyntheticLayerRow {
                    spec: s,
                    singular_values: s.singular_values(),
                })
                .collect(),
        },
    )?;
    println!(
        "wrote {count} layers and calibration ({} samples{}) to {}",
        cfg.samples,
        if deficient { ", rank-deficient" } else { "" },
        cfg.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use lowrank_core::synthetic::LossKind;

    #[test]
    fn layer_files_are_unique() {
        let files = layer_files(&["a/b", "a_b", "a b", "c"]);
        assert_eq!(files, vec!["a_b.csv", "a_b-2.csv", "a_b-3.csv", "c.csv"]);
    }

    #[test]
    fn aligned_toy_is_tight() {
        let spec = ToySpec {
            widths: vec![4, 3],
            batch: 5,
            activation: Activation::Identity,
            loss: LossKind::Linear,
            perturbation: Perturbation::Aligned,
            scales: vec![1e-3],
        };
        let (net, x, dir) = build_toy(&spec, 3).unwrap();
        let c = check_bound(&net, &x, &dir, &spec.scales).unwrap();
        assert!((c[0].ratio.unwrap() - 1.0).abs() <= 1e-9);
    }
}
