//! Run configuration: a JSON file merged with command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use lowrank_core::factorize::{Method, DEFAULT_ALS_ITERATIONS};
use lowrank_core::sensitivity::Activation;
use lowrank_core::synthetic::LossKind;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_TRIM: f64 = 0.02;
pub const DEFAULT_SWEEP_POINTS: usize = 33;
pub const DEFAULT_SAMPLES: usize = 64;

/// Flags shared by every subcommand. Each one overrides the matching key of
/// the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config file; flags take precedence over its keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weight container directory.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration container directory.
    #[arg(long)]
    pub calib: Option<PathBuf>,
    #[arg(long, value_parser = ["svd", "whitened", "als"])]
    pub method: Option<String>,
    /// One tolerance for every layer.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Per-group tolerance, NAME=VAL (repeatable).
    #[arg(long = "eps-group", value_name = "NAME=VAL")]
    pub eps_group: Vec<String>,
    /// Compression ratio target in [0, 1).
    #[arg(long)]
    pub target_ratio: Option<f64>,
    /// ALS iterations.
    #[arg(long)]
    pub tau: Option<usize>,
    /// Stop ALS once the relative improvement drops to this value.
    #[arg(long)]
    pub early_stop: Option<f64>,
    /// Fraction of outlying layers dropped from the envelope.
    #[arg(long)]
    pub trim: Option<f64>,
    /// Worker threads for per-layer work.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated tolerances for `sweep`.
    #[arg(long, value_delimiter = ',')]
    pub eps_grid: Option<Vec<f64>>,
    /// Calibration samples per layer for `gen-synthetic`.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Number of layers for `gen-synthetic` (at most 12).
    #[arg(long)]
    pub layers: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub model: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub method: Option<Method>,
    pub eps: Option<f64>,
    pub eps_group: Option<BTreeMap<String, f64>>,
    pub target_ratio: Option<f64>,
    pub tau: Option<usize>,
    pub early_stop: Option<f64>,
    pub trim: Option<f64>,
    pub jobs: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub eps_grid: Option<Vec<f64>>,
    pub samples: Option<usize>,
    pub layers: Option<usize>,
    pub toy: Option<ToySpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ToleranceSpec {
    Uniform(f64),
    Groups(BTreeMap<String, f64>),
    TargetRatio(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Perturbation {
    Random,
    Zero,
    /// Single identity layer with linear loss `C = D X`, so `ΔW X ∝ C`.
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    pub batch: usize,
    pub activation: Activation,
    pub loss: LossKind,
    pub perturbation: Perturbation,
    pub scales: Vec<f64>,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            widths: vec![8, 12, 12, 6],
            batch: 8,
            activation: Activation::Tanh,
            loss: LossKind::HalfSquaredError,
            perturbation: Perturbation::Random,
            scales: vec![1e-2, 1e-3, 1e-4],
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub method: Method,
    pub tolerance: Option<ToleranceSpec>,
    pub tau: usize,
    pub early_stop: Option<f64>,
    pub trim: f64,
    pub jobs: usize,
    pub seed: u64,
    pub out: PathBuf,
    pub eps_grid: Option<Vec<f64>>,
    pub samples: usize,
    pub layers: Option<usize>,
    pub toy: ToySpec,
}

/// The part of the configuration that determines outputs; written into
/// reports. `jobs` and `out` are left out so reruns compare byte for byte.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub model: Option<String>,
    pub calib: Option<String>,
    pub method: Method,
    pub tolerance: Option<ToleranceSpec>,
    pub tau: usize,
    pub early_stop: Option<f64>,
    pub trim: f64,
    pub seed: u64,
}

fn parse_group(s: &str) -> CliResult<(String, f64)> {
    let (name, value) = s
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--eps-group expects NAME=VAL, got `{s}`")))?;
    if name.is_empty() {
        return Err(CliError::config(format!(
            "--eps-group `{s}` has an empty group name"
        )));
    }
    let eps = value
        .parse::<f64>()
        .map_err(|_| CliError::config(format!("--eps-group `{s}`: `{value}` is not a number")))?;
    Ok((name.to_string(), eps))
}

fn check_eps(eps: f64, what: &str) -> CliResult<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(CliError::config(format!("{what} = {eps} outside [0, 1]")));
    }
    Ok(())
}

pub fn load_file(path: &Path) -> CliResult<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn resolve(args: &RunArgs) -> CliResult<Self> {
        let file = match &args.config {
            Some(p) => load_file(p)?,
            None => FileConfig::default(),
        };

        let method = match &args.method {
            Some(m) => m
                .parse::<Method>()
                .map_err(|e| CliError::config(e.to_string()))?,
            None => file.method.unwrap_or(Method::Als),
        };

        // Flags replace the file's tolerance form wholesale.
        let flag_groups = args
            .eps_group
            .iter()
            .map(|s| parse_group(s))
            .collect::<CliResult<BTreeMap<_, _>>>()?;
        let flag_forms = [
            args.eps.is_some(),
            !flag_groups.is_empty(),
            args.target_ratio.is_some(),
        ];
        let (eps, groups, ratio) = if flag_forms.iter().any(|&b| b) {
            (
                args.eps,
                (!flag_groups.is_empty()).then_some(flag_groups),
                args.target_ratio,
            )
        } else {
            (file.eps, file.eps_group, file.target_ratio)
        };
        let tolerance = match (eps, groups, ratio) {
            (None, None, None) => None,
            (Some(e), None, None) => {
                check_eps(e, "eps")?;
                Some(ToleranceSpec::Uniform(e))
            }
            (None, Some(g), None) => {
                for (name, &e) in &g {
                    check_eps(e, &format!("eps for group `{name}`"))?;
                }
                Some(ToleranceSpec::Groups(g))
            }
            (None, None, Some(r)) => {
                if !(0.0..1.0).contains(&r) {
                    return Err(CliError::config(format!("target ratio {r} outside [0, 1)")));
                }
                Some(ToleranceSpec::TargetRatio(r))
            }
            _ => {
                return Err(CliError::config(
                    "give exactly one of eps, eps-group or target-ratio",
                ))
            }
        };

        let trim = args.trim.or(file.trim).unwrap_or(DEFAULT_TRIM);
        if !(0.0..0.5).contains(&trim) {
            return Err(CliError::config(format!("trim {trim} outside [0, 0.5)")));
        }
        let jobs = args.jobs.or(file.jobs).unwrap_or(1);
        if jobs == 0 {
            return Err(CliError::config("jobs must be at least 1"));
        }
        let early_stop = args.early_stop.or(file.early_stop);
        if let Some(t) = early_stop {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(CliError::config(format!(
                    "early stop tolerance {t} must be >= 0"
                )));
            }
        }
        let eps_grid = args.eps_grid.clone().or(file.eps_grid);
        if let Some(grid) = &eps_grid {
            if grid.is_empty() {
                return Err(CliError::config("eps grid is empty"));
            }
            for &e in grid {
                check_eps(e, "eps grid value")?;
            }
        }
        let samples = args.samples.or(file.samples).unwrap_or(DEFAULT_SAMPLES);
        if samples == 0 {
            return Err(CliError::config("samples must be at least 1"));
        }
        let toy = file.toy.unwrap_or_default();
        validate_toy(&toy)?;

        Ok(Self {
            model: args.model.clone().or(file.model),
            calib: args.calib.clone().or(file.calib),
            method,
            tolerance,
            tau: args.tau.or(file.tau).unwrap_or(DEFAULT_ALS_ITERATIONS),
            early_stop,
            trim,
            jobs,
            seed: args.seed.or(file.seed).unwrap_or(0),
            out: args
                .out
                .clone()
                .or(file.out)
                .unwrap_or_else(|| PathBuf::from("out")),
            eps_grid,
            samples,
            layers: args.layers.or(file.layers),
            toy,
        })
    }

    pub fn model_path(&self) -> CliResult<&Path> {
        self.model
            .as_deref()
            .ok_or_else(|| CliError::config("no model container given (--model)"))
    }

    pub fn tolerance(&self) -> CliResult<&ToleranceSpec> {
        self.tolerance.as_ref().ok_or_else(|| {
            CliError::config("no tolerance given (--eps, --eps-group or --target-ratio)")
        })
    }

    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            model: self.model.as_ref().map(|p| p.display().to_string()),
            calib: self.calib.as_ref().map(|p| p.display().to_string()),
            method: self.method,
            tolerance: self.tolerance.clone(),
            tau: self.tau,
            early_stop: self.early_stop,
            trim: self.trim,
            seed: self.seed,
        }
    }
}

fn validate_toy(toy: &ToySpec) -> CliResult<()> {
    if toy.widths.len() < 2 || toy.widths.contains(&0) {
        return Err(CliError::config(
            "toy widths need an input width and at least one positive layer width",
        ));
    }
    if toy.batch == 0 {
        return Err(CliError::config("toy batch must be at least 1"));
    }
    if toy.scales.is_empty() || toy.scales.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(CliError::config("toy scales must be positive and finite"));
    }
    if toy.perturbation == Perturbation::Aligned
        && (toy.widths.len() != 2
            || toy.activation != Activation::Identity
            || toy.loss != LossKind::Linear)
    {
        return Err(CliError::config(
            "aligned perturbation needs a single identity layer with linear loss",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_forms_are_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"eps": 0.2, "tau": 3, "method": "svd"}"#).unwrap();
        let args = RunArgs {
            config: Some(path.clone()),
            tau: Some(7),
            ..RunArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.tau, 7);
        assert_eq!(cfg.method, Method::Svd);
        assert_eq!(cfg.tolerance, Some(ToleranceSpec::Uniform(0.2)));

        let args = RunArgs {
            config: Some(path),
            target_ratio: Some(0.3),
            ..RunArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.tolerance, Some(ToleranceSpec::TargetRatio(0.3)));

        let both = RunArgs {
            eps: Some(0.1),
            target_ratio: Some(0.3),
            ..RunArgs::default()
        };
        assert!(matches!(
            RunConfig::resolve(&both),
            Err(CliError::Config(_))
        ));
    }

    #[test]
    fn range_checks() {
        for args in [
            RunArgs {
                eps: Some(1.5),
                ..RunArgs::default()
            },
            RunArgs {
                target_ratio: Some(1.0),
                ..RunArgs::default()
            },
            RunArgs {
                trim: Some(0.5),
                ..RunArgs::default()
            },
            RunArgs {
                jobs: Some(0),
                ..RunArgs::default()
            },
            RunArgs {
                eps_group: vec!["attn".into()],
                ..RunArgs::default()
            },
            RunArgs {
                eps_group: vec!["attn=x".into()],
                ..RunArgs::default()
            },
        ] {
            assert!(
                matches!(RunConfig::resolve(&args), Err(CliError::Config(_))),
                "{args:?}"
            );
        }
        let ok = RunArgs {
            eps_group: vec!["attn=0.1".into(), "mlp=0.3".into()],
            ..RunArgs::default()
        };
        let cfg = RunConfig::resolve(&ok).unwrap();
        let ToleranceSpec::Groups(g) = cfg.tolerance.unwrap() else {
            panic!()
        };
        assert_eq!(g["mlp"], 0.3);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(&path, r#"{"epsilon": 0.2}"#).unwrap();
        let args = RunArgs {
            config: Some(path),
            ..RunArgs::default()
        };
        assert!(matches!(
            RunConfig::resolve(&args),
            Err(CliError::Config(_))
        ));
    }
}
