//! Two-phase workflow: train candidates on train, rank them on dev, retrain
//! the selection on train+dev, then predict the test split with a single
//! model or a majority-vote ensemble.
//!
//! Everything is driven by a versioned TOML document:
//!
//! ```toml
//! version = 1
//! task = "B"
//! seed = 7
//! output_dir = "out"
//!
//! [data]
//! train = "train.csv"
//! dev = "dev.csv"
//! test = "test.csv"
//!
//! [featurizer]
//! n_min = 1
//! n_max = 3
//! dimension = 65536
//! normalize = "l2"
//! lowercase = false
//!
//! [[models]]
//! name = "wce"
//! epochs = 8
//! loss = { kind = "weighted_ce", weights = "auto" }
//!
//! [[models]]
//! name = "focal"
//! loss = { kind = "focal", alpha = 0.35, gamma = 4.0 }
//!
//! [ensemble]
//! members = ["wce", "focal", "ce"]
//! fallback = "focal"
//!
//! [gridsearch]
//! alphas = [0.25, 0.35, 0.5]
//! gammas = [0.0, 2.0, 4.0]
//! base = "focal"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.
//! `DEVCLF_OUT` and `DEVCLF_SEED` override `output_dir` and `seed`; nothing
//! else is read from the environment.
//!
//! Output tree: `models/`, `reports/`, `predictions/`, `prompts/`,
//! `selection.json` and `manifest.json`. The manifest lists every other file
//! with its SHA-256 and is rewritten at the end of each command.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::classifier::{
    load_model_for, save_model, train, ClassifierError, LrSchedule, Predictor, SoftmaxClassifier, TrainConfig,
};
use crate::corpus::{
    class_distribution, class_weights, load_dataset, merge_splits, CorpusError, DataFormat, DatasetSplit, LabelSchema,
    SplitName, TaskId,
};
use crate::ensemble::{EnsembleError, EnsembleSpec};
use crate::featurizer::FeaturizerConfig;
use crate::losses::{Alpha, LossSpec};
use crate::metrics::{evaluate, rank_models, ConfusionMatrix, MetricsError, MetricsReport, RankKey};
use crate::prompts::{FewShotExample, PromptError, PromptTemplate};

pub const CONFIG_VERSION: u32 = 1;
pub const ENV_OUT: &str = "DEVCLF_OUT";
pub const ENV_SEED: &str = "DEVCLF_SEED";
pub const DEFAULT_ALPHAS: [f64; 5] = [0.25, 0.35, 0.5, 0.75, 1.0];
pub const DEFAULT_GAMMAS: [f64; 4] = [0.0, 1.0, 2.0, 4.0];

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("cannot read config {}: {source}", .path.display())]
    ConfigIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config {}: {message}", .path.display())]
    ConfigParse { path: PathBuf, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("training {model} failed: {source}")]
    Train {
        model: String,
        #[source]
        source: ClassifierError,
    },
    #[error("cannot load model {}: {source}", .path.display())]
    ModelLoad {
        path: PathBuf,
        #[source]
        source: ClassifierError,
    },
    #[error("missing {}; run `{hint}` first", .path.display())]
    MissingArtifact { path: PathBuf, hint: &'static str },
    #[error("malformed artifact {}: {message}", .path.display())]
    BadArtifact { path: PathBuf, message: String },
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("the {phase} phase may not read the {split} split")]
    SplitAccessDenied { phase: Phase, split: SplitName },
    #[error("cannot write {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl PipelineError {
    /// 2 for bad input or usage, 1 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::ConfigIo { .. }
            | PipelineError::ConfigParse { .. }
            | PipelineError::Config(_)
            | PipelineError::Usage(_)
            | PipelineError::Corpus(_)
            | PipelineError::ModelLoad { .. }
            | PipelineError::MissingArtifact { .. }
            | PipelineError::BadArtifact { .. }
            | PipelineError::Prompt(_) => 2,
            PipelineError::Train { .. }
            | PipelineError::Ensemble(_)
            | PipelineError::Metrics(_)
            | PipelineError::SplitAccessDenied { .. }
            | PipelineError::Io { .. } => 1,
        }
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Inferred from each file's extension when absent.
    #[serde(default)]
    pub format: Option<DataFormat>,
    pub train: PathBuf,
    pub dev: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

/// `"auto"` derives inverse-frequency weights from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSource {
    Explicit(Vec<f64>),
    Keyword(String),
}

impl Default for WeightSource {
    fn default() -> Self {
        WeightSource::Keyword("auto".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossConfig {
    #[default]
    Ce,
    WeightedCe {
        #[serde(default)]
        weights: WeightSource,
    },
    Focal {
        alpha: Alpha,
        gamma: f64,
    },
}

impl LossConfig {
    fn resolve(&self, split: &DatasetSplit) -> Result<LossSpec> {
        Ok(match self {
            LossConfig::Ce => LossSpec::Ce,
            LossConfig::WeightedCe {
                weights: WeightSource::Explicit(w),
            } => LossSpec::WeightedCe { weights: w.clone() },
            LossConfig::WeightedCe {
                weights: WeightSource::Keyword(_),
            } => {
                let w = class_weights(&class_distribution(split)?)?;
                LossSpec::WeightedCe { weights: w.0 }
            }
            LossConfig::Focal { alpha, gamma } => LossSpec::Focal {
                alpha: alpha.clone(),
                gamma: *gamma,
            },
        })
    }
}

fn default_lr() -> f64 {
    TrainConfig::default().learning_rate
}
fn default_epochs() -> usize {
    TrainConfig::default().epochs
}
fn default_batch() -> usize {
    TrainConfig::default().batch_size
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    #[serde(default)]
    pub weight_decay: f64,
    /// Defaults to the pipeline seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub loss: LossConfig,
}

impl ModelConfig {
    pub fn named(name: &str, loss: LossConfig) -> Self {
        ModelConfig {
            name: name.to_string(),
            learning_rate: default_lr(),
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr_schedule: LrSchedule::default(),
            weight_decay: 0.0,
            seed: None,
            loss,
        }
    }

    fn train_config(&self, loss: LossSpec, pipeline_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_schedule: self.lr_schedule,
            weight_decay: self.weight_decay,
            seed: self.seed.unwrap_or(pipeline_seed),
            loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MemberRef {
    Index(usize),
    Name(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: Vec<String>,
    /// Required: there is no implicit fallback member.
    pub fallback: MemberRef,
}

impl EnsembleConfig {
    pub fn fallback_index(&self) -> Result<usize> {
        match &self.fallback {
            MemberRef::Index(i) if *i < self.members.len() => Ok(*i),
            MemberRef::Index(i) => Err(PipelineError::Config(format!(
                "ensemble fallback index {i} out of range for {} members",
                self.members.len()
            ))),
            MemberRef::Name(n) => self
                .members
                .iter()
                .position(|m| m == n)
                .ok_or_else(|| PipelineError::Config(format!("ensemble fallback {n:?} is not a member"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default = "default_gammas")]
    pub gammas: Vec<f64>,
    /// Model whose optimizer settings every cell reuses.
    #[serde(default)]
    pub base: Option<String>,
}

fn default_alphas() -> Vec<f64> {
    DEFAULT_ALPHAS.to_vec()
}
fn default_gammas() -> Vec<f64> {
    DEFAULT_GAMMAS.to_vec()
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            alphas: default_alphas(),
            gammas: default_gammas(),
            base: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PromptsConfig {
    #[serde(default)]
    pub examples: Vec<FewShotExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub task: TaskId,
    #[serde(default = "default_seed")]
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub featurizer: FeaturizerConfig,
    pub models: Vec<ModelConfig>,
    #[serde(default)]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default)]
    pub gridsearch: Option<GridConfig>,
    #[serde(default)]
    pub prompts: PromptsConfig,
}

fn default_seed() -> u64 {
    TrainConfig::default().seed
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && !name.ends_with("-final")
        && name != "ensemble"
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
        && !name.starts_with('.')
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Reads, resolves relative paths and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| PipelineError::ConfigIo {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::from_toml(&text).map_err(|e| PipelineError::ConfigParse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        let env_out = std::env::var_os(ENV_OUT).map(PathBuf::from);
        let env_seed = std::env::var(ENV_SEED).ok();
        config.apply_overrides(env_out, env_seed.as_deref())?;
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.train);
        fix(&mut self.data.dev);
        if let Some(t) = &mut self.data.test {
            fix(t);
        }
    }

    pub fn apply_overrides(&mut self, output_dir: Option<PathBuf>, seed: Option<&str>) -> Result<()> {
        if let Some(out) = output_dir {
            self.output_dir = out;
        }
        if let Some(s) = seed {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| PipelineError::Usage(format!("seed must be an unsigned integer, got {s:?}")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            ));
        }
        self.featurizer
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.models.is_empty() {
            return bad("at least one [[models]] entry is required".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.models {
            if !valid_name(&m.name) {
                return bad(format!("invalid model name {:?}", m.name));
            }
            if !seen.insert(m.name.as_str()) {
                return bad(format!("duplicate model name {:?}", m.name));
            }
            if let LossConfig::WeightedCe {
                weights: WeightSource::Keyword(k),
            } = &m.loss
            {
                if k != "auto" {
                    return bad(format!("model {}: weights must be \"auto\" or a list", m.name));
                }
            }
            m.train_config(LossSpec::Ce, self.seed)
                .validate()
                .map_err(|e| PipelineError::Config(format!("model {}: {e}", m.name)))?;
        }
        if let Some(e) = &self.ensemble {
            if e.members.len() < 2 {
                return bad("ensemble needs at least 2 members".into());
            }
            for name in &e.members {
                if self.model(name).is_none() {
                    return bad(format!("ensemble member {name:?} is not a configured model"));
                }
            }
            e.fallback_index()?;
        }
        if let Some(g) = &self.gridsearch {
            if g.alphas.is_empty() || g.gammas.is_empty() {
                return bad("gridsearch alphas and gammas must be non-empty".into());
            }
            if g.alphas.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
                return bad("gridsearch alphas must be positive".into());
            }
            if g.gammas.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
                return bad("gridsearch gammas must be non-negative".into());
            }
            if let Some(b) = &g.base {
                if self.model(b).is_none() {
                    return bad(format!("gridsearch base {b:?} is not a configured model"));
                }
            }
        }
        Ok(())
    }

    pub fn schema(&self) -> LabelSchema {
        LabelSchema::for_task(self.task)
    }

    pub fn model(&self, name: &str) -> Option<&ModelConfig> {
        self.models.iter().find(|m| m.name == name)
    }

    fn split_path(&self, split: SplitName) -> Option<&Path> {
        match split {
            SplitName::Train => Some(&self.data.train),
            SplitName::Dev => Some(&self.data.dev),
            SplitName::Test => self.data.test.as_deref(),
        }
    }
}

// ---------------------------------------------------------------------------
// Split access audit

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Select,
    Finalize,
    Predict,
    Gridsearch,
    Prompts,
}

impl Phase {
    pub fn may_read(self, split: SplitName) -> bool {
        match self {
            Phase::Train | Phase::Finalize | Phase::Gridsearch => split != SplitName::Test,
            Phase::Select => false,
            Phase::Predict => split == SplitName::Test,
            Phase::Prompts => true,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Select => "select",
            Phase::Finalize => "finalize",
            Phase::Predict => "predict",
            Phase::Gridsearch => "gridsearch",
            Phase::Prompts => "prompts",
        })
    }
}

/// Records every split read and refuses reads a phase is not entitled to.
#[derive(Debug, Default)]
pub struct SplitAudit {
    reads: Mutex<Vec<(Phase, SplitName)>>,
}

impl SplitAudit {
    pub fn reads(&self) -> Vec<(Phase, SplitName)> {
        self.reads.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.reads.lock().unwrap().clear();
    }

    fn check(&self, phase: Phase, split: SplitName) -> Result<()> {
        if !phase.may_read(split) {
            return Err(PipelineError::SplitAccessDenied { phase, split });
        }
        self.reads.lock().unwrap().push((phase, split));
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub model: String,
    pub train_examples: usize,
    pub model_path: PathBuf,
    pub dev: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedModel {
    pub name: String,
    pub macro_f1: f64,
    pub micro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub key: RankKey,
    pub top_k: usize,
    pub ranking: Vec<RankedModel>,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalizeSummary {
    pub model: String,
    pub train_examples: usize,
    pub dev_examples: usize,
    pub model_path: PathBuf,
}

impl FinalizeSummary {
    pub fn total_examples(&self) -> usize {
        self.train_examples + self.dev_examples
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub index: usize,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decided_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictSummary {
    pub target: String,
    pub predictions_path: PathBuf,
    pub rows: Vec<PredictionRow>,
    /// Present only when every test example carries a gold label.
    pub report: Option<MetricsReport>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub alpha: f64,
    pub gamma: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: GridCell,
    pub cells: Vec<GridCell>,
}

impl GridResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,gamma,macro_f1\n");
        for c in &self.cells {
            let _ = writeln!(out, "{:?},{:?},{:?}", c.alpha, c.gamma, c.macro_f1);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    Train,
    Inference,
}

impl std::str::FromStr for PromptMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(PromptMode::Train),
            "inference" => Ok(PromptMode::Inference),
            _ => Err(format!("unknown prompt mode {s:?}")),
        }
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptMode::Train => "train",
            PromptMode::Inference => "inference",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub task: TaskId,
    pub seed: u64,
    pub last_command: String,
    pub files: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct StoredReport {
    model: String,
    split: SplitName,
    metrics: MetricsReport,
    confusion: ConfusionMatrix,
}

// ---------------------------------------------------------------------------
// Grid search

/// Evaluates every (alpha, gamma) cell, possibly in parallel, and returns the
/// best one. Ties go to the smaller gamma, then the smaller alpha. Cells are
/// reported alpha-major in grid order.
pub fn gridsearch_with<F, E>(alphas: &[f64], gammas: &[f64], evaluate_cell: F) -> Result<GridResult, E>
where
    F: Fn(f64, f64) -> Result<f64, E> + Sync,
    E: Send,
{
    let pairs: Vec<(f64, f64)> = alphas
        .iter()
        .flat_map(|&a| gammas.iter().map(move |&g| (a, g)))
        .collect();
    let cells: Vec<GridCell> = pairs
        .par_iter()
        .map(|&(alpha, gamma)| evaluate_cell(alpha, gamma).map(|macro_f1| GridCell { alpha, gamma, macro_f1 }))
        .collect::<Result<_, E>>()?;
    let best = *cells
        .iter()
        .reduce(|best, c| {
            let better = c.macro_f1 > best.macro_f1
                || (c.macro_f1 == best.macro_f1 && (c.gamma, c.alpha) < (best.gamma, best.alpha));
            if better {
                c
            } else {
                best
            }
        })
        .expect("grid search needs a non-empty grid");
    Ok(GridResult { best, cells })
}

// ---------------------------------------------------------------------------
// Pipeline

#[derive(Debug)]
pub struct Pipeline {
    config: PipelineConfig,
    audit: SplitAudit,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, bytes).map_err(io)
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("pipeline artifacts serialize");
    s.push('\n');
    s.into_bytes()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &'static str) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PipelineError::MissingArtifact {
                path: path.to_path_buf(),
                hint,
            })
        }
        Err(source) => {
            return Err(PipelineError::ConfigIo {
                path: path.to_path_buf(),
                source,
            })
        }
    };
    serde_json::from_str(&text).map_err(|e| PipelineError::BadArtifact {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline {
            config,
            audit: SplitAudit::default(),
        })
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::new(PipelineConfig::load(path)?)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn audit(&self) -> &SplitAudit {
        &self.audit
    }

    pub fn output_dir(&self) -> &Path {
        &self.config.output_dir
    }

    pub fn model_path(&self, name: &str) -> PathBuf {
        self.output_dir().join("models").join(format!("{name}.model"))
    }

    pub fn final_model_path(&self, name: &str) -> PathBuf {
        self.output_dir().join("models").join(format!("{name}-final.model"))
    }

    pub fn selection_path(&self) -> PathBuf {
        self.output_dir().join("selection.json")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.output_dir().join("manifest.json")
    }

    pub fn predictions_path(&self, target: &str) -> PathBuf {
        self.output_dir().join("predictions").join(format!("{target}.csv"))
    }

    fn report_stem(&self, name: &str, split: SplitName) -> PathBuf {
        self.output_dir().join("reports").join(format!("{name}.{split}"))
    }

    /// Loads a split on behalf of `phase`; refused reads never touch the disk.
    pub fn load_split(&self, phase: Phase, split: SplitName) -> Result<DatasetSplit> {
        self.audit.check(phase, split)?;
        let path = self
            .config
            .split_path(split)
            .ok_or_else(|| PipelineError::Config(format!("no {split} path configured")))?;
        let format = match self.config.data.format {
            Some(f) => f,
            None => DataFormat::from_path(path).ok_or_else(|| {
                PipelineError::Config(format!(
                    "cannot infer data format of {}; set data.format",
                    path.display()
                ))
            })?,
        };
        let data = load_dataset(path, format, &self.config.schema(), split, split.requires_labels())?;
        log::info!("loaded {} {} examples from {}", data.len(), split, path.display());
        Ok(data)
    }

    fn train_model(&self, model: &ModelConfig, data: &DatasetSplit) -> Result<SoftmaxClassifier> {
        let spec = model.loss.resolve(data)?;
        let cfg = model.train_config(spec, self.config.seed);
        train(data, &self.config.featurizer, &cfg).map_err(|source| PipelineError::Train {
            model: model.name.clone(),
            source,
        })
    }

    fn write_report(&self, name: &str, split: SplitName, cm: &ConfusionMatrix, rep: &MetricsReport) -> Result<()> {
        let stem = self.report_stem(name, split);
        let stored = StoredReport {
            model: name.to_string(),
            split,
            metrics: rep.clone(),
            confusion: cm.clone(),
        };
        let with_ext = |ext: &str| {
            let mut p = stem.clone().into_os_string();
            p.push(ext);
            PathBuf::from(p)
        };
        write_file(&with_ext(".json"), &to_json(&stored))?;
        let mut txt = rep.to_table(&format!("{name} on {split}"));
        txt.push('\n');
        txt.push_str(&rep.to_records());
        write_file(&with_ext(".txt"), txt.as_bytes())?;
        write_file(&with_ext(".confusion.csv"), cm.to_csv().as_bytes())
    }

    fn save_artifact(&self, clf: &SoftmaxClassifier, name: &str, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|source| PipelineError::Io {
                path: dir.to_path_buf(),
                source,
            })?;
        }
        save_model(clf, path).map_err(|source| PipelineError::Train {
            model: name.to_string(),
            source,
        })
    }

    fn load_artifact(&self, path: &Path, hint: &'static str) -> Result<SoftmaxClassifier> {
        if !path.exists() {
            return Err(PipelineError::MissingArtifact {
                path: path.to_path_buf(),
                hint,
            });
        }
        load_model_for(path, &self.config.schema()).map_err(|source| PipelineError::ModelLoad {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Final artifact when present, otherwise the train-only candidate.
    fn load_best_artifact(&self, name: &str) -> Result<SoftmaxClassifier> {
        let final_path = self.final_model_path(name);
        if final_path.exists() {
            return self.load_artifact(&final_path, "finalize");
        }
        log::warn!("{} not found; using train-only model {name}", final_path.display());
        self.load_artifact(&self.model_path(name), "train")
    }

    /// Trains one named model, or every configured model, on train and
    /// scores it on dev.
    pub fn cmd_train(&self, model: Option<&str>) -> Result<Vec<TrainSummary>> {
        let models: Vec<&ModelConfig> = match model {
            Some(name) => vec![self
                .config
                .model(name)
                .ok_or_else(|| PipelineError::Usage(format!("unknown model {name:?}")))?],
            None => self.config.models.iter().collect(),
        };
        let train_split = self.load_split(Phase::Train, SplitName::Train)?;
        let dev = self.load_split(Phase::Train, SplitName::Dev)?;
        let dist = class_distribution(&train_split)?;
        log::info!("train class counts {:?}", dist.counts);

        let summaries = models
            .par_iter()
            .map(|m| {
                log::info!("training {} on {} examples", m.name, train_split.len());
                let clf = self.train_model(m, &train_split)?;
                let path = self.model_path(&m.name);
                self.save_artifact(&clf, &m.name, &path)?;
                let (cm, rep) = evaluate(&clf, &dev)?;
                self.write_report(&m.name, SplitName::Dev, &cm, &rep)?;
                log::info!("{} dev macro_f1 {:.4}", m.name, rep.macro_f1);
                Ok(TrainSummary {
                    model: m.name.clone(),
                    train_examples: train_split.len(),
                    model_path: path,
                    dev: rep,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_manifest("train")?;
        Ok(summaries)
    }

    /// Ranks every configured model by dev macro-F1 from the stored reports.
    pub fn cmd_select(&self, top_k: usize) -> Result<Selection> {
        if top_k == 0 {
            return Err(PipelineError::Usage("top-k must be at least 1".into()));
        }
        let mut reports = Vec::with_capacity(self.config.models.len());
        for m in &self.config.models {
            let mut path = self.report_stem(&m.name, SplitName::Dev).into_os_string();
            path.push(".json");
            let stored: StoredReport = read_json(Path::new(&path), "train")?;
            reports.push((m.name.clone(), stored.metrics));
        }
        let key = RankKey::MacroF1;
        let order = rank_models(&reports, key);
        let by_name: BTreeMap<&str, &MetricsReport> = reports.iter().map(|(n, r)| (n.as_str(), r)).collect();
        let ranking = order
            .iter()
            .map(|n| RankedModel {
                name: n.clone(),
                macro_f1: by_name[n.as_str()].macro_f1,
                micro_f1: by_name[n.as_str()].micro_f1,
            })
            .collect();
        let selection = Selection {
            key,
            top_k,
            ranking,
            selected: order.into_iter().take(top_k).collect(),
        };
        write_file(&self.selection_path(), &to_json(&selection))?;
        log::info!("selected {:?}", selection.selected);
        self.write_manifest("select")?;
        Ok(selection)
    }

    pub fn read_selection(&self) -> Result<Selection> {
        read_json(&self.selection_path(), "select")
    }

    /// Retrains each selected model from scratch on train+dev.
    pub fn cmd_finalize(&self) -> Result<Vec<FinalizeSummary>> {
        let selection = self.read_selection()?;
        let train_split = self.load_split(Phase::Finalize, SplitName::Train)?;
        let dev = self.load_split(Phase::Finalize, SplitName::Dev)?;
        let merged = merge_splits(&train_split, &dev)?;
        let models: Vec<&ModelConfig> = selection
            .selected
            .iter()
            .map(|n| {
                self.config.model(n).ok_or_else(|| PipelineError::BadArtifact {
                    path: self.selection_path(),
                    message: format!("selected model {n:?} is not configured"),
                })
            })
            .collect::<Result<_>>()?;
        let summaries = models
            .par_iter()
            .map(|m| {
                log::info!(
                    "training {}-final on {} examples ({} train + {} dev)",
                    m.name,
                    merged.len(),
                    train_split.len(),
                    dev.len()
                );
                let clf = self.train_model(m, &merged)?;
                let path = self.final_model_path(&m.name);
                self.save_artifact(&clf, &m.name, &path)?;
                Ok(FinalizeSummary {
                    model: m.name.clone(),
                    train_examples: train_split.len(),
                    dev_examples: dev.len(),
                    model_path: path,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.write_manifest("finalize")?;
        Ok(summaries)
    }

    /// Builds the configured ensemble from final artifacts.
    pub fn load_ensemble(&self) -> Result<EnsembleSpec> {
        let cfg = self
            .config
            .ensemble
            .as_ref()
            .ok_or_else(|| PipelineError::Usage("no [ensemble] block configured".into()))?;
        let members = cfg
            .members
            .iter()
            .map(|n| Ok((n.clone(), Arc::new(self.load_best_artifact(n)?) as Arc<dyn Predictor>)))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnsembleSpec::new(members, cfg.fallback_index()?)?)
    }

    /// Predicts the test split with `model`, or with the ensemble when no
    /// model is named, or with the top selected model when neither exists.
    pub fn cmd_predict(&self, model: Option<&str>) -> Result<PredictSummary> {
        enum Target {
            Single(String, SoftmaxClassifier),
            Ensemble(EnsembleSpec),
        }
        let target = match model {
            Some("ensemble") => Target::Ensemble(self.load_ensemble()?),
            Some(name) => {
                if self.config.model(name).is_none() {
                    return Err(PipelineError::Usage(format!("unknown model {name:?}")));
                }
                Target::Single(name.to_string(), self.load_best_artifact(name)?)
            }
            None if self.config.ensemble.is_some() => Target::Ensemble(self.load_ensemble()?),
            None => {
                let sel = self.read_selection()?;
                let name = sel
                    .selected
                    .first()
                    .cloned()
                    .ok_or_else(|| PipelineError::BadArtifact {
                        path: self.selection_path(),
                        message: "empty selection".into(),
                    })?;
                let clf = self.load_best_artifact(&name)?;
                Target::Single(name, clf)
            }
        };
        let test = self.load_split(Phase::Predict, SplitName::Test)?;
        let schema = self.config.schema();
        let label_name = |code: u32| schema.name(code).unwrap_or("?").to_string();

        let (name, rows, predictor): (String, Vec<PredictionRow>, &dyn Predictor) = match &target {
            Target::Single(name, clf) => {
                let rows = clf
                    .predict_split(&test)
                    .into_iter()
                    .enumerate()
                    .map(|(index, p)| PredictionRow {
                        index,
                        label: label_name(p.label),
                        decided_by: None,
                    })
                    .collect();
                (name.clone(), rows, clf)
            }
            Target::Ensemble(ens) => {
                let rows = ens
                    .predict_split(&test)?
                    .into_iter()
                    .enumerate()
                    .map(|(index, o)| PredictionRow {
                        index,
                        label: label_name(o.label),
                        decided_by: Some(o.decided_by.as_str().to_string()),
                    })
                    .collect();
                ("ensemble".to_string(), rows, ens)
            }
        };

        let mut csv = String::from(if matches!(target, Target::Ensemble(_)) {
            "index,label,decided_by\n"
        } else {
            "index,label\n"
        });
        for r in &rows {
            match &r.decided_by {
                Some(d) => writeln!(csv, "{},{},{}", r.index, r.label, d),
                None => writeln!(csv, "{},{}", r.index, r.label),
            }
            .expect("writing to a String");
        }
        let predictions_path = self.predictions_path(&name);
        write_file(&predictions_path, csv.as_bytes())?;

        let report = if !test.is_empty() && test.is_labeled() {
            let (cm, rep) = evaluate(predictor, &test)?;
            self.write_report(&name, SplitName::Test, &cm, &rep)?;
            log::info!("{name} test macro_f1 {:.4}", rep.macro_f1);
            Some(rep)
        } else {
            log::info!("test split unlabeled; predictions only");
            None
        };
        self.write_manifest("predict")?;
        Ok(PredictSummary {
            target: name,
            predictions_path,
            rows,
            report,
        })
    }

    /// Focal-loss grid over (alpha, gamma), scored by dev macro-F1.
    pub fn cmd_gridsearch(&self) -> Result<GridResult> {
        let grid = self.config.gridsearch.clone().unwrap_or_default();
        let base = match &grid.base {
            Some(name) => self.config.model(name).cloned().expect("validated base model"),
            None => ModelConfig::named("grid", LossConfig::Ce),
        };
        let train_split = self.load_split(Phase::Gridsearch, SplitName::Train)?;
        let dev = self.load_split(Phase::Gridsearch, SplitName::Dev)?;
        let result = gridsearch_with(&grid.alphas, &grid.gammas, |alpha, gamma| {
            let cfg = base.train_config(LossSpec::focal(alpha, gamma), self.config.seed);
            let clf = train(&train_split, &self.config.featurizer, &cfg).map_err(|source| PipelineError::Train {
                model: format!("grid(alpha={alpha}, gamma={gamma})"),
                source,
            })?;
            let (_, rep) = evaluate(&clf, &dev)?;
            log::info!("alpha {alpha} gamma {gamma} dev macro_f1 {:.4}", rep.macro_f1);
            Ok::<f64, PipelineError>(rep.macro_f1)
        })?;
        let reports = self.output_dir().join("reports");
        write_file(&reports.join("gridsearch.csv"), result.to_csv().as_bytes())?;
        write_file(&reports.join("gridsearch.json"), &to_json(&result))?;
        log::info!("best alpha {} gamma {}", result.best.alpha, result.best.gamma);
        self.write_manifest("gridsearch")?;
        Ok(result)
    }

    /// Renders one prompt per example as JSONL `{"index", "prompt"}` records.
    pub fn cmd_render_prompts(&self, split: SplitName, mode: PromptMode) -> Result<PathBuf> {
        let data = self.load_split(Phase::Prompts, split)?;
        let template = PromptTemplate::for_task(self.config.task);
        let examples = (template.num_examples() > 0).then_some(self.config.prompts.examples.as_slice());
        let mut out = String::new();
        for (index, ex) in data.examples.iter().enumerate() {
            let label = match mode {
                PromptMode::Train => Some(ex.label.ok_or(CorpusError::Unlabeled { index })?.to_string()),
                PromptMode::Inference => None,
            };
            let prompt = template.render(&ex.text, label.as_deref(), examples)?;
            let record = serde_json::json!({ "index": index, "prompt": prompt });
            out.push_str(&record.to_string());
            out.push('\n');
        }
        let path = self.output_dir().join("prompts").join(format!("{split}-{mode}.jsonl"));
        write_file(&path, out.as_bytes())?;
        self.write_manifest("render-prompts")?;
        Ok(path)
    }

    /// Human-readable summary of every stored report and the grid table.
    pub fn cmd_report(&self) -> Result<String> {
        let dir = self.output_dir().join("reports");
        let mut files = Vec::new();
        if dir.is_dir() {
            collect_files(&dir, &mut files).map_err(|source| PipelineError::ConfigIo {
                path: dir.clone(),
                source,
            })?;
        }
        files.sort();
        let mut out = String::new();
        for path in &files {
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name == "gridsearch.json" {
                let grid: GridResult = read_json(path, "gridsearch")?;
                let _ = writeln!(out, "focal grid search (dev macro F1)");
                let _ = writeln!(out, "{:>8}  {:>8}  {:>8}", "alpha", "gamma", "F1");
                for c in &grid.cells {
                    let _ = writeln!(out, "{:>8}  {:>8}  {:>8.4}", c.alpha, c.gamma, c.macro_f1);
                }
                let _ = writeln!(out, "best alpha={} gamma={}\n", grid.best.alpha, grid.best.gamma);
            } else if name.ends_with(".json") {
                let stored: StoredReport = read_json(path, "train")?;
                out.push_str(
                    &stored
                        .metrics
                        .to_table(&format!("{} on {}", stored.model, stored.split)),
                );
                out.push('\n');
            }
        }
        if let Ok(sel) = self.read_selection() {
            let _ = writeln!(out, "selection (top {}): {}", sel.top_k, sel.selected.join(", "));
        }
        if out.is_empty() {
            return Err(PipelineError::MissingArtifact {
                path: dir,
                hint: "train",
            });
        }
        Ok(out)
    }

    /// Hashes every output file and writes `manifest.json`.
    pub fn write_manifest(&self, command: &str) -> Result<Manifest> {
        let root = self.output_dir();
        let manifest_path = self.manifest_path();
        let mut files = Vec::new();
        collect_files(root, &mut files).map_err(|source| PipelineError::Io {
            path: root.to_path_buf(),
            source,
        })?;
        let mut entries = Vec::with_capacity(files.len());
        for path in files.into_iter().filter(|p| *p != manifest_path) {
            let bytes = fs::read(&path).map_err(|source| PipelineError::Io {
                path: path.clone(),
                source,
            })?;
            let rel = path.strip_prefix(root).unwrap_or(&path);
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            entries.push(ManifestEntry {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: hex(&Sha256::digest(&bytes)),
            });
        }
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            version: CONFIG_VERSION,
            task: self.config.task,
            seed: self.config.seed,
            last_command: command.to_string(),
            files: entries,
        };
        write_file(&manifest_path, &to_json(&manifest))?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
task = "B"
output_dir = "out"

[data]
train = "train.csv"
dev = "dev.jsonl"

[[models]]
name = "ce"

[[models]]
name = "wce"
loss = { kind = "weighted_ce", weights = "auto" }

[[models]]
name = "focal"
epochs = 3
seed = 9
loss = { kind = "focal", alpha = 0.35, gamma = 4.0 }

[ensemble]
members = ["ce", "wce", "focal"]
fallback = "focal"
"#;

    #[test]
    fn parses_and_defaults() {
        let c = PipelineConfig::from_toml(MINIMAL).unwrap();
        c.validate().unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.featurizer, FeaturizerConfig::default());
        assert_eq!(
            c.models[1].loss,
            LossConfig::WeightedCe {
                weights: WeightSource::default()
            }
        );
        assert_eq!(c.models[2].train_config(LossSpec::Ce, 42).seed, 9);
        assert_eq!(c.models[0].train_config(LossSpec::Ce, 42), TrainConfig::default());
        assert_eq!(c.ensemble.as_ref().unwrap().fallback_index().unwrap(), 2);
        assert!(c.gridsearch.is_none());
    }

    #[test]
    fn fallback_by_index_and_errors() {
        let mut c = PipelineConfig::from_toml(&MINIMAL.replace("fallback = \"focal\"", "fallback = 1")).unwrap();
        assert_eq!(c.ensemble.as_ref().unwrap().fallback_index().unwrap(), 1);
        c.ensemble.as_mut().unwrap().fallback = MemberRef::Index(3);
        assert!(matches!(c.validate(), Err(PipelineError::Config(_))));
        c.ensemble.as_mut().unwrap().fallback = MemberRef::Name("nope".into());
        assert!(c.validate().is_err());
        let missing = MINIMAL.replace("fallback = \"focal\"\n", "");
        assert!(PipelineConfig::from_toml(&missing).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let cases = [
            MINIMAL.replace("version = 1", "version = 2"),
            MINIMAL.replace("name = \"wce\"", "name = \"ce\""),
            MINIMAL.replace("name = \"wce\"", "name = \"x-final\""),
            MINIMAL.replace("\"auto\"", "\"magic\""),
            MINIMAL.replace(
                "members = [\"ce\", \"wce\", \"focal\"]",
                "members = [\"ce\", \"ghost\"]",
            ),
            format!("{MINIMAL}\n[gridsearch]\nalphas = []\n"),
            format!("{MINIMAL}\n[gridsearch]\ngammas = [-1.0]\n"),
        ];
        for text in cases {
            let parsed = PipelineConfig::from_toml(&text);
            assert!(parsed.map(|c| c.validate()).map_or(true, |r| r.is_err()), "{text}");
        }
        assert!(PipelineConfig::from_toml(&MINIMAL.replace("task = \"B\"", "task = \"B\"\nbogus = 1")).is_err());
    }

    #[test]
    fn grid_defaults_contain_reported_winner() {
        let g = GridConfig::default();
        assert!(g.alphas.contains(&0.35));
        assert!(g.gammas.contains(&4.0));
        let c = PipelineConfig::from_toml(&format!("{MINIMAL}\n[gridsearch]\nbase = \"focal\"\n")).unwrap();
        assert_eq!(c.gridsearch.unwrap().alphas, DEFAULT_ALPHAS.to_vec());
    }

    #[test]
    fn paths_and_overrides() {
        let mut c = PipelineConfig::from_toml(MINIMAL).unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.data.train, Path::new("/cfg/train.csv"));
        assert_eq!(c.output_dir, Path::new("/cfg/out"));
        c.apply_overrides(Some("/elsewhere".into()), Some("17")).unwrap();
        assert_eq!(c.output_dir, Path::new("/elsewhere"));
        assert_eq!(c.seed, 17);
        assert_eq!(c.data.train, Path::new("/cfg/train.csv"));
        assert!(c.apply_overrides(None, Some("-1")).is_err());
    }

    #[test]
    fn phase_permissions() {
        for split in [SplitName::Train, SplitName::Dev, SplitName::Test] {
            assert!(!Phase::Select.may_read(split));
            assert_eq!(Phase::Finalize.may_read(split), split != SplitName::Test);
            assert_eq!(Phase::Predict.may_read(split), split == SplitName::Test);
        }
        let audit = SplitAudit::default();
        assert!(matches!(
            audit.check(Phase::Finalize, SplitName::Test),
            Err(PipelineError::SplitAccessDenied { .. })
        ));
        audit.check(Phase::Train, SplitName::Dev).unwrap();
        assert_eq!(audit.reads(), vec![(Phase::Train, SplitName::Dev)]);
    }

    #[test]
    fn grid_tie_breaks() {
        let flat = gridsearch_with(&[0.5, 0.25], &[4.0, 1.0], |_, _| Ok::<_, ()>(0.7)).unwrap();
        assert_eq!((flat.best.alpha, flat.best.gamma), (0.25, 1.0));
        assert_eq!(flat.cells.len(), 4);
        assert_eq!((flat.cells[0].alpha, flat.cells[0].gamma), (0.5, 4.0));
        let gamma_first = gridsearch_with(&[0.25, 0.5], &[1.0, 2.0], |a, g| {
            Ok::<_, ()>(if g == 1.0 || a == 0.25 { 0.9 } else { 0.1 })
        })
        .unwrap();
        assert_eq!((gamma_first.best.alpha, gamma_first.best.gamma), (0.25, 1.0));
        let planted = gridsearch_with(&DEFAULT_ALPHAS, &DEFAULT_GAMMAS, |a, g| {
            Ok::<_, ()>(if (a, g) == (0.75, 2.0) { 0.99 } else { 0.5 - a / 10.0 })
        })
        .unwrap();
        assert_eq!((planted.best.alpha, planted.best.gamma), (0.75, 2.0));
        assert_eq!(
            gridsearch_with(&[1.0], &[0.0], |_, _| Err::<f64, _>("boom")),
            Err("boom")
        );
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Corpus(CorpusError::NotFound("x".into())).exit_code(), 2);
        assert_eq!(PipelineError::Usage("u".into()).exit_code(), 2);
        assert_eq!(
            PipelineError::SplitAccessDenied {
                phase: Phase::Select,
                split: SplitName::Test
            }
            .exit_code(),
            1
        );
    }

    #[test]
    fn hex_digest() {
        assert_eq!(
            hex(&Sha256::digest(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
