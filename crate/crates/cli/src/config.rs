//! Experiment configuration: one JSON document plus dotted-path overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use uturn_core::data::{Builtin, GaussianMixtureSpec, NormalizeMode};
use uturn_core::diagnostics::FeatureMap;
use uturn_core::reverse::Integrator;
use uturn_core::score::{MlpConfig, Optimizer};
use uturn_core::{Schedule, ScheduleKind, ScheduleSpec};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every stream in a run is derived from it.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    #[serde(default = "default_schedule")]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub score: ScoreConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub reverse: ReverseConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub uturn: UturnConfig,
    #[serde(default)]
    pub kid: KidInputs,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_schedule() -> ScheduleSpec {
    ScheduleSpec::standard(ScheduleKind::Linear)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub source: SourceConfig,
    /// Rows used for training and for seeding forward runs. Files default to
    /// all their rows minus the holdout.
    #[serde(default)]
    pub samples: Option<usize>,
    /// Extra rows kept apart for KID comparisons.
    #[serde(default)]
    pub holdout: usize,
    /// Empirical normalization. Mixtures are standardized analytically
    /// instead, so this defaults to none for them and per-coordinate
    /// otherwise.
    #[serde(default)]
    pub normalize: Option<NormalizeChoice>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeChoice {
    None,
    PerCoordinate,
    Global,
}

impl NormalizeChoice {
    pub fn mode(self) -> Option<NormalizeMode> {
        match self {
            NormalizeChoice::None => None,
            NormalizeChoice::PerCoordinate => Some(NormalizeMode::PerCoordinate),
            NormalizeChoice::Global => Some(NormalizeMode::Global),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    Mixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        variances: Vec<f64>,
        /// Shift and rescale the mixture to zero mean and unit second moment.
        #[serde(default = "yes")]
        standardize: bool,
    },
    Builtin {
        name: Builtin,
    },
    /// CSV (`.csv`) or the binary sample format (anything else).
    File {
        path: PathBuf,
    },
}

fn yes() -> bool {
    true
}

impl SourceConfig {
    /// The mixture exactly as sampled, after optional standardization.
    pub fn mixture(&self) -> Option<Result<GaussianMixtureSpec, uturn_core::Error>> {
        match self {
            SourceConfig::Mixture {
                weights,
                means,
                variances,
                standardize,
            } => {
                let spec = GaussianMixtureSpec {
                    weights: weights.clone(),
                    means: means.clone(),
                    variances: variances.clone(),
                };
                Some(if *standardize { spec.standardized() } else { spec.validate().map(|_| spec) })
            }
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreConfig {
    /// Exact mixture score; needs a mixture source without normalization.
    #[default]
    Analytic,
    Train {
        #[serde(default)]
        model: MlpConfig,
        #[serde(default)]
        hyper: TrainSettings,
    },
    Checkpoint {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_final_fraction")]
    pub final_lr_fraction: f64,
}

fn default_batch() -> usize {
    128
}
fn default_train_steps() -> usize {
    8000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_final_fraction() -> f64 {
    0.05
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            batch: default_batch(),
            steps: default_train_steps(),
            learning_rate: default_lr(),
            optimizer: Optimizer::default(),
            final_lr_fraction: default_final_fraction(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    /// Forward ensemble size; defaults to the dataset size.
    #[serde(default)]
    pub samples: Option<usize>,
    /// Number of evenly spaced non-zero grid steps; 0 and `N` are always in.
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Explicit record grid, overriding `grid_points`.
    #[serde(default)]
    pub record_steps: Option<Vec<usize>>,
    #[serde(default)]
    pub save_ensemble: bool,
}

fn default_grid_points() -> usize {
    20
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            samples: None,
            grid_points: default_grid_points(),
            record_steps: None,
            save_ensemble: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReverseConfig {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Defaults to `N`.
    #[serde(default)]
    pub start_step: Option<usize>,
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "one")]
    pub substeps: usize,
    /// Spacing of recorded reverse steps.
    #[serde(default = "one")]
    pub record_every: usize,
    /// Anchors for the half-decay curve; defaults to the simulation grid.
    #[serde(default)]
    pub anchors: Option<Vec<usize>>,
}

fn default_samples() -> usize {
    2000
}
fn one() -> usize {
    1
}

impl Default for ReverseConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            start_step: None,
            integrator: Integrator::default(),
            substeps: 1,
            record_every: 1,
            anchors: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "default_alpha")]
    pub ks_alpha: f64,
    #[serde(default = "default_window")]
    pub plateau_window: usize,
    #[serde(default = "default_rel_tol")]
    pub plateau_rel_tol: f64,
    /// Spacing of the forward grid used for score-norm curves.
    #[serde(default = "default_norm_every")]
    pub record_every: usize,
    #[serde(default = "identity")]
    pub feature: FeatureMap,
    #[serde(default = "default_resamples")]
    pub bootstrap_resamples: usize,
}

fn default_alpha() -> f64 {
    0.05
}
fn default_window() -> usize {
    50
}
fn default_rel_tol() -> f64 {
    0.02
}
fn default_norm_every() -> usize {
    10
}
fn identity() -> FeatureMap {
    FeatureMap::Identity
}
fn default_resamples() -> usize {
    10
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            ks_alpha: default_alpha(),
            plateau_window: default_window(),
            plateau_rel_tol: default_rel_tol(),
            record_every: default_norm_every(),
            feature: identity(),
            bootstrap_resamples: default_resamples(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UturnConfig {
    /// Defaults to 12 evenly spaced steps ending at `N`.
    #[serde(default)]
    pub turn_steps: Option<Vec<usize>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

impl Default for UturnConfig {
    fn default() -> Self {
        Self {
            turn_steps: None,
            samples: default_samples(),
        }
    }
}

/// Sample files compared by the `kid` subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KidInputs {
    #[serde(default)]
    pub real: Option<PathBuf>,
    #[serde(default)]
    pub gen: Option<PathBuf>,
}

/// Sets `path` (dot separated) in `doc` to `raw`, read as JSON when it
/// parses and as a string otherwise.
pub fn apply_override(doc: &mut Value, path: &str, raw: &str) -> Result<(), String> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("malformed override path `{path}`"));
    }
    let mut node = doc;
    for (i, key) in keys.iter().enumerate() {
        if !node.is_object() {
            if node.is_null() {
                *node = Value::Object(Default::default());
            } else {
                return Err(format!("`{}` is not an object", keys[..i].join(".")));
            }
        }
        let map = node.as_object_mut().expect("object");
        if i == keys.len() - 1 {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        node = map.entry((*key).to_string()).or_insert(Value::Null);
    }
    unreachable!("non-empty path")
}

/// Parses `key=value` pairs from `--set`.
pub fn parse_set(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.to_string()))
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        Self::from_str_with(&text, overrides)
    }

    pub fn from_str_with(text: &str, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut doc: Value =
            serde_json::from_str(text).map_err(|e| CliError::Config(vec![format!("config is not valid JSON: {e}")]))?;
        // Overrides land on the defaults-filled document, so `--set
        // schedule.b2=...` keeps the default kind.
        if let Ok(filled) = serde_json::from_value::<ExperimentConfig>(doc.clone()) {
            doc = serde_json::to_value(filled)?;
        }
        let mut problems = Vec::new();
        for (k, v) in overrides {
            if let Err(e) = apply_override(&mut doc, k, v) {
                problems.push(e);
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every violation at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut p = Vec::new();
        let schedule = Schedule::new(self.schedule.clone());
        if let Err(e) = &schedule {
            p.push(format!("schedule: {e}"));
        }
        let big_n = self.schedule.steps;
        let ds = &self.dataset;
        let is_mixture = matches!(ds.source, SourceConfig::Mixture { .. });
        if let Some(Err(e)) = ds.source.mixture() {
            p.push(format!("dataset.source: {e}"));
        }
        match &ds.source {
            SourceConfig::File { path } if !path.exists() => {
                p.push(format!("dataset.source.path {} does not exist", path.display()))
            }
            SourceConfig::File { .. } => {}
            _ if ds.samples.is_none() => p.push("dataset.samples is required for generated sources".into()),
            _ => {}
        }
        if let Some(m) = ds.samples {
            if m < 2 {
                p.push(format!("dataset.samples must be at least 2, got {m}"));
            }
        }
        if ds.holdout == 1 {
            p.push("dataset.holdout must be 0 or at least 2".into());
        }
        match &self.score {
            ScoreConfig::Analytic => {
                if !is_mixture {
                    p.push("score.kind = analytic needs a mixture dataset".into());
                }
                if ds.normalize.is_some_and(|n| n != NormalizeChoice::None) {
                    p.push("score.kind = analytic is incompatible with empirical normalization".into());
                }
            }
            ScoreConfig::Checkpoint { path } if !path.exists() => {
                p.push(format!("score.path {} does not exist", path.display()))
            }
            ScoreConfig::Train { hyper, .. } => {
                if hyper.batch == 0 {
                    p.push("score.hyper.batch must be positive".into());
                }
                if !(hyper.learning_rate > 0.0) {
                    p.push("score.hyper.learning_rate must be positive".into());
                }
            }
            _ => {}
        }
        let sim = &self.simulation;
        if let Some(steps) = &sim.record_steps {
            if steps.windows(2).any(|w| w[0] >= w[1]) {
                p.push("simulation.record_steps must be strictly increasing".into());
            }
            if steps.iter().any(|&n| n > big_n) {
                p.push(format!("simulation.record_steps must lie in [0, {big_n}]"));
            }
        } else if sim.grid_points == 0 {
            p.push("simulation.grid_points must be positive".into());
        }
        let rev = &self.reverse;
        if rev.samples == 0 {
            p.push("reverse.samples must be positive".into());
        }
        if rev.start_step.is_some_and(|s| s > big_n) {
            p.push(format!("reverse.start_step exceeds N = {big_n}"));
        }
        if rev.substeps == 0 || rev.record_every == 0 {
            p.push("reverse.substeps and reverse.record_every must be positive".into());
        }
        let diag = &self.diagnostics;
        if !(diag.ks_alpha > 0.0 && diag.ks_alpha < 1.0) {
            p.push(format!("diagnostics.ks_alpha must be in (0, 1), got {}", diag.ks_alpha));
        }
        if diag.record_every == 0 {
            p.push("diagnostics.record_every must be positive".into());
        }
        if let FeatureMap::ExternalFile { path } = &diag.feature {
            if !path.exists() {
                p.push(format!("diagnostics.feature.path {} does not exist", path.display()));
            }
        }
        if let Some(steps) = &self.uturn.turn_steps {
            if steps.is_empty() || steps.windows(2).any(|w| w[0] >= w[1]) {
                p.push("uturn.turn_steps must be non-empty and strictly increasing".into());
            }
            if steps.iter().any(|&n| n == 0 || n > big_n) {
                p.push(format!("uturn.turn_steps must lie in [1, {big_n}]"));
            }
        }
        if self.uturn.samples == 0 {
            p.push("uturn.samples must be positive".into());
        }
        for (name, path) in [("kid.real", &self.kid.real), ("kid.gen", &self.kid.gen)] {
            if let Some(path) = path {
                if !path.exists() {
                    p.push(format!("{name} {} does not exist", path.display()));
                }
            }
        }
        if p.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(p))
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule::new(self.schedule.clone()).expect("validated")
    }

    /// Steps `0`, `round(k·N/grid_points)` for `k = 1..=grid_points`.
    pub fn record_grid(&self) -> Vec<usize> {
        if let Some(s) = &self.simulation.record_steps {
            return s.clone();
        }
        grid(self.schedule.steps, self.simulation.grid_points)
    }
}

/// `0` followed by `k` evenly spaced steps ending at `steps`.
pub fn grid(steps: usize, k: usize) -> Vec<usize> {
    let mut v = vec![0];
    for i in 1..=k {
        let n = ((i * steps) as f64 / k as f64).round() as usize;
        if n > *v.last().expect("non-empty") {
            v.push(n);
        }
    }
    v
}
