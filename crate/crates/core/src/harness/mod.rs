//! Run configuration, experiment orchestration and artifact persistence.
//!
//! A run directory holds `metrics.csv` (one row per iteration) and
//! `manifest.json` (resolved config, tool version, simulated time span and
//! the SHA-256 of the metrics file). Both are written to a temporary name
//! and renamed into place once complete.

mod verify;

pub use verify::{verify, CheckResult, VerifyOptions, VerifyReport};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netsim::DelayModel;
use crate::optim::{run_training, write_metrics_csv, Algorithm, MetricsRecord, OptimError, OptimizerConfig, RunSummary};
use crate::problems::{ProblemError, ProblemSpec, QuadraticSpec};

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUTPUT_ROOT_ENV: &str = "WAGMA_OUTPUT_ROOT";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

pub mod exit_code {
    pub const SUCCESS: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const PROTOCOL: i32 = 3;
    pub const DIVERGENCE: i32 = 4;
    pub const IO: i32 = 5;
    pub const VERIFY: i32 = 6;
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("run failed: {0}")]
    Run(#[from] OptimError),
    #[error("{0} verification check(s) failed")]
    VerifyFailed(usize),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => exit_code::CONFIG,
            HarnessError::Io { .. } => exit_code::IO,
            HarnessError::VerifyFailed(_) => exit_code::VERIFY,
            HarnessError::Run(e) => match e {
                OptimError::InvalidConfig(_) | OptimError::Problem(_) => exit_code::CONFIG,
                OptimError::Divergence { .. } | OptimError::NonFiniteGradient { .. } => exit_code::DIVERGENCE,
                _ => exit_code::PROTOCOL,
            },
        }
    }
}

impl From<ProblemError> for HarnessError {
    fn from(e: ProblemError) -> Self {
        HarnessError::Config(e.to_string())
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_problem")]
    pub problem: ProblemSpec,
    #[serde(default)]
    pub delay: DelayModel,
    /// Run directory; relative paths resolve against the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

fn default_name() -> String {
    "run".into()
}

fn default_problem() -> ProblemSpec {
    ProblemSpec::Quadratic(QuadraticSpec::default())
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            name: default_name(),
            seed: 0,
            optimizer: OptimizerConfig::default(),
            problem: default_problem(),
            delay: DelayModel::default(),
            output_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        RunConfig::from_json(&text).map_err(|e| match e {
            HarnessError::Config(msg) => HarnessError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every module precondition; no simulation state is touched.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(HarnessError::Config(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(HarnessError::Config(format!("invalid run name {:?}", self.name)));
        }
        self.optimizer
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        let p = self.optimizer.processes;
        self.delay.validate(p).map_err(HarnessError::Config)?;
        self.problem.validate(p, self.optimizer.batch_size)?;
        Ok(())
    }

    pub fn run_dir(&self, output_root: &Path) -> PathBuf {
        match &self.output_dir {
            Some(dir) if dir.is_absolute() => dir.clone(),
            Some(dir) => output_root.join(dir),
            None => output_root.join(&self.name),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub tool_version: String,
    pub seed: u64,
    pub start_time_ms: f64,
    pub end_time_ms: f64,
    pub metrics_file: String,
    pub metrics_sha256: String,
    pub rows: usize,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub final_accuracy: Option<f64>,
    pub max_gamma: f64,
    pub max_staleness: u64,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub records: Vec<MetricsRecord>,
    pub summary: RunSummary,
}

/// Runs the configured training without touching the filesystem.
pub fn simulate(cfg: &RunConfig) -> Result<(Vec<MetricsRecord>, RunSummary), HarnessError> {
    cfg.validate()?;
    let problem = cfg.problem.build(cfg.seed)?;
    let run = run_training(&cfg.optimizer, problem.as_ref(), &cfg.delay, cfg.seed)?;
    Ok((run.records, run.summary))
}

pub fn metrics_csv_bytes(records: &[MetricsRecord]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_metrics_csv(records, &mut buf).expect("writing to memory");
    buf
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Validates, runs, and writes `metrics.csv` and `manifest.json` into the
/// run directory. Nothing is written if validation fails.
pub fn execute(cfg: &RunConfig, output_root: &Path) -> Result<RunOutcome, HarnessError> {
    let (records, summary) = simulate(cfg)?;
    let dir = cfg.run_dir(output_root);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let csv = metrics_csv_bytes(&records);
    write_atomic(&dir.join(METRICS_FILE), &csv)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        tool_version: TOOL_VERSION.into(),
        seed: cfg.seed,
        start_time_ms: 0.0,
        end_time_ms: summary.final_time.as_millis(),
        metrics_file: METRICS_FILE.into(),
        metrics_sha256: sha256_hex(&csv),
        rows: records.len(),
        final_loss: summary.final_loss,
        final_grad_norm_sq: summary.final_grad_norm_sq,
        final_accuracy: summary.final_accuracy,
        max_gamma: summary.max_gamma,
        max_staleness: summary.max_staleness,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    log::info!("{}: {} rows written to {}", cfg.name, records.len(), dir.display());
    Ok(RunOutcome {
        dir,
        manifest,
        records,
        summary,
    })
}

/// A mode for `compare`: an algorithm, optionally with its own `tau`
/// (`local_sgd:1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModeSpec {
    pub algorithm: Algorithm,
    pub tau: Option<Option<u64>>,
}

impl ModeSpec {
    pub fn parse(text: &str) -> Result<ModeSpec, HarnessError> {
        let (name, tau) = match text.split_once(':') {
            Some((name, tau)) => (name, Some(tau)),
            None => (text, None),
        };
        let algorithm = Algorithm::parse(name.trim())
            .ok_or_else(|| HarnessError::Config(format!("unknown mode {name:?}")))?;
        let tau = match tau.map(str::trim) {
            None => None,
            Some("inf") => Some(None),
            Some(v) => Some(Some(
                v.parse()
                    .map_err(|_| HarnessError::Config(format!("invalid tau {v:?} in mode {text:?}")))?,
            )),
        };
        Ok(ModeSpec { algorithm, tau })
    }

    pub fn label(&self) -> String {
        match self.tau {
            None => self.algorithm.name().into(),
            Some(None) => format!("{}:inf", self.algorithm.name()),
            Some(Some(t)) => format!("{}:{t}", self.algorithm.name()),
        }
    }

    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.optimizer.algorithm = self.algorithm;
        if let Some(tau) = self.tau {
            cfg.optimizer.tau = tau;
        }
        cfg.name = format!("{}-{}", base.name, self.label().replace(':', "-tau"));
        cfg.output_dir = None;
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub final_loss: f64,
    pub final_grad_norm_sq: f64,
    pub final_accuracy: Option<f64>,
    pub sim_time_ms: f64,
    pub iterations_per_sim_second: f64,
}

impl ComparisonRow {
    fn from_summary(mode: String, s: &RunSummary) -> Self {
        let seconds = s.final_time.as_millis() / 1e3;
        ComparisonRow {
            mode,
            final_loss: s.final_loss,
            final_grad_norm_sq: s.final_grad_norm_sq,
            final_accuracy: s.final_accuracy,
            sim_time_ms: s.final_time.as_millis(),
            iterations_per_sim_second: s.iterations as f64 / seconds,
        }
    }
}

/// Runs every config and tabulates the results. The configs must agree on
/// everything except the algorithm and its mode-specific fields.
pub fn compare_configs(configs: &[(String, RunConfig)]) -> Result<Vec<ComparisonRow>, HarnessError> {
    let Some((_, first)) = configs.first() else {
        return Ok(Vec::new());
    };
    let shared = |c: &RunConfig| {
        let o = &c.optimizer;
        (
            c.seed,
            c.problem.clone(),
            c.delay,
            o.processes,
            o.iterations,
            o.batch_size,
            o.learning_rate,
            o.update_rule,
        )
    };
    for (label, cfg) in configs {
        if shared(cfg) != shared(first) {
            return Err(HarnessError::Config(format!(
                "{label} differs from the first config in a shared field (seed, problem, delay, processes, iterations, batch size, learning rate or update rule)"
            )));
        }
    }
    configs
        .iter()
        .map(|(label, cfg)| {
            let (_, summary) = simulate(cfg)?;
            Ok(ComparisonRow::from_summary(label.clone(), &summary))
        })
        .collect()
}

pub fn compare(base: &RunConfig, modes: &[ModeSpec]) -> Result<Vec<ComparisonRow>, HarnessError> {
    let configs: Vec<(String, RunConfig)> = modes.iter().map(|m| (m.label(), m.apply(base))).collect();
    compare_configs(&configs)
}

pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<16} {:>14} {:>16} {:>10} {:>14} {:>12}\n",
        "mode", "final_loss", "grad_norm_sq", "accuracy", "sim_time_ms", "iter/sim_s"
    );
    for r in rows {
        let acc = r.final_accuracy.map_or("-".to_string(), |a| format!("{:.4}", a));
        out.push_str(&format!(
            "{:<16} {:>14.6e} {:>16.6e} {:>10} {:>14.1} {:>12.3}\n",
            r.mode, r.final_loss, r.final_grad_norm_sq, acc, r.sim_time_ms, r.iterations_per_sim_second
        ));
    }
    out
}

/// One `--vary key=v1,v2,...` axis; `key` is a dotted path into the JSON
/// config (`optimizer.group_size`).
#[derive(Debug, Clone, PartialEq)]
pub struct SweepAxis {
    pub key: String,
    pub values: Vec<serde_json::Value>,
}

impl SweepAxis {
    pub fn parse(text: &str) -> Result<SweepAxis, HarnessError> {
        let (key, values) = text
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("expected key=v1,v2,... in {text:?}")))?;
        let values: Vec<serde_json::Value> = values
            .split(',')
            .map(|v| serde_json::from_str(v.trim()).unwrap_or_else(|_| serde_json::Value::String(v.trim().into())))
            .collect();
        if key.is_empty() || values.is_empty() {
            return Err(HarnessError::Config(format!("empty sweep axis {text:?}")));
        }
        Ok(SweepAxis { key: key.into(), values })
    }
}

fn set_path(root: &mut serde_json::Value, key: &str, value: serde_json::Value) -> Result<(), HarnessError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| HarnessError::Config(format!("sweep key {key:?} does not name an object field")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| HarnessError::Config(format!("sweep key {key:?}: no field {part:?}")))?;
    }
    unreachable!("split yields at least one part")
}

/// The cartesian product of `axes` applied to `base`, each with a distinct
/// name. Every variant is validated before anything runs.
pub fn sweep_configs(base: &RunConfig, axes: &[SweepAxis]) -> Result<Vec<RunConfig>, HarnessError> {
    let mut variants = vec![(serde_json::to_value(base).expect("config serializes"), Vec::<String>::new())];
    for axis in axes {
        let mut next = Vec::new();
        for (value, tags) in &variants {
            for v in &axis.values {
                let mut value = value.clone();
                set_path(&mut value, &axis.key, v.clone())?;
                let mut tags = tags.clone();
                let shown = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                tags.push(format!("{}={shown}", axis.key));
                next.push((value, tags));
            }
        }
        variants = next;
    }
    variants
        .into_iter()
        .map(|(value, tags)| {
            let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| HarnessError::Config(e.to_string()))?;
            let suffix: String = tags.join("_").chars().map(|c| if c.is_ascii_alphanumeric() || "=._-".contains(c) { c } else { '-' }).collect();
            cfg.name = format!("{}_{suffix}", base.name);
            cfg.output_dir = None;
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

/// Executes every sweep variant in sequence under `output_root/<base name>`.
pub fn sweep(base: &RunConfig, axes: &[SweepAxis], output_root: &Path) -> Result<Vec<RunOutcome>, HarnessError> {
    let root = base.run_dir(output_root);
    sweep_configs(base, axes)?.iter().map(|cfg| execute(cfg, &root)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::LogisticSpec;

    fn small() -> RunConfig {
        RunConfig {
            name: "small".into(),
            seed: 3,
            optimizer: OptimizerConfig {
                processes: 4,
                group_size: 2,
                tau: Some(4),
                iterations: 30,
                ..OptimizerConfig::default()
            },
            problem: ProblemSpec::Quadratic(QuadraticSpec {
                dim: 8,
                samples: 64,
                ..QuadraticSpec::default()
            }),
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trips() {
        for cfg in [small(), RunConfig::default()] {
            let text = cfg.to_json();
            let back = RunConfig::from_json(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.to_json(), text);
        }
        let logistic = RunConfig {
            problem: ProblemSpec::Logistic(LogisticSpec::default()),
            optimizer: OptimizerConfig {
                tau: None,
                ..OptimizerConfig::default()
            },
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_json(&logistic.to_json()).unwrap(), logistic);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = RunConfig::from_json(r#"{"schema_version": 1, "optimizer": {"processes": 8}}"#).unwrap();
        assert_eq!(cfg.optimizer.processes, 8);
        assert_eq!(cfg.optimizer.group_size, 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_schema_are_rejected() {
        assert!(RunConfig::from_json(r#"{"schema_version": 1, "bogus": 3}"#).is_err());
        let cfg = RunConfig::from_json(r#"{"schema_version": 2}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(HarnessError::Config(_))));
    }

    #[test]
    fn alpha_beta_conflict_is_a_config_error() {
        let mut cfg = small();
        cfg.optimizer.beta = true;
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), exit_code::CONFIG);
    }

    #[test]
    fn execute_writes_hashed_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let out = execute(&small(), dir.path()).unwrap();
        let csv = fs::read(out.dir.join(METRICS_FILE)).unwrap();
        assert_eq!(sha256_hex(&csv), out.manifest.metrics_sha256);
        assert_eq!(out.manifest.rows, 30);
        let text = fs::read_to_string(out.dir.join(MANIFEST_FILE)).unwrap();
        let manifest: RunManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(manifest, out.manifest);
        assert!(!out.dir.join("metrics.tmp").exists());
    }

    #[test]
    fn mode_specs() {
        assert_eq!(
            ModeSpec::parse("local_sgd:1").unwrap(),
            ModeSpec {
                algorithm: Algorithm::LocalSgd,
                tau: Some(Some(1))
            }
        );
        assert_eq!(ModeSpec::parse("wagma").unwrap().tau, None);
        assert_eq!(ModeSpec::parse("dpsgd:inf").unwrap().tau, Some(None));
        assert!(ModeSpec::parse("sgp").is_err());
        assert!(ModeSpec::parse("wagma:x").is_err());
    }

    #[test]
    fn compare_repeats_identical_rows() {
        let modes = [ModeSpec::parse("wagma").unwrap(), ModeSpec::parse("wagma").unwrap()];
        let rows = compare(&small(), &modes).unwrap();
        assert_eq!(rows[0], rows[1]);
    }

    #[test]
    fn compare_rejects_mismatched_configs() {
        let a = small();
        let mut b = small();
        b.seed = 9;
        let err = compare_configs(&[("a".into(), a), ("b".into(), b)]).unwrap_err();
        assert!(matches!(err, HarnessError::Config(_)));
    }

    #[test]
    fn sweep_expands_product() {
        let axes = [
            SweepAxis::parse("optimizer.group_size=1,2,4").unwrap(),
            SweepAxis::parse("seed=1,2").unwrap(),
        ];
        let configs = sweep_configs(&small(), &axes).unwrap();
        assert_eq!(configs.len(), 6);
        assert_eq!(configs[5].optimizer.group_size, 4);
        assert_eq!(configs[5].seed, 2);
        assert_eq!(configs[5].name, "small_optimizer.group_size=4_seed=2");
        assert!(sweep_configs(&small(), &[SweepAxis::parse("optimizer.group_size=8").unwrap()]).is_err());
        assert!(sweep_configs(&small(), &[SweepAxis::parse("nothing.here=1").unwrap()]).is_err());
    }

    #[test]
    fn run_dir_resolution() {
        let mut cfg = small();
        assert_eq!(cfg.run_dir(Path::new("/out")), PathBuf::from("/out/small"));
        cfg.output_dir = Some("x/y".into());
        assert_eq!(cfg.run_dir(Path::new("/out")), PathBuf::from("/out/x/y"));
        cfg.output_dir = Some("/abs".into());
        assert_eq!(cfg.run_dir(Path::new("/out")), PathBuf::from("/abs"));
    }
}
