//! Run configuration: a strict JSON file, overridden by command-line flags,
//! overridden in turn by the `ABLB_SEED` environment variable.

use std::path::{Path, PathBuf};

use ablb_core::dataset::{PromptTemplate, TaskSpec};
use ablb_core::train::TrainScope;
use ablb_core::tuner::TuneParams;
use ablb_core::ModelConfig;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::io::read_to_string;

pub const SEED_ENV: &str = "ABLB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub modulus: u32,
    /// `instruction-a`, `instruction-b`, `all`, or a comma-separated list of
    /// template names such as `a-yes-no,b-true-false-rev`.
    pub templates: String,
    pub max_seq_len: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            modulus: 4,
            templates: "instruction-a".into(),
            max_seq_len: 64,
        }
    }
}

impl TaskConfig {
    pub fn templates(&self) -> AppResult<Vec<PromptTemplate>> {
        let names: Vec<String> = match self.templates.as_str() {
            "all" => PromptTemplate::builtin_names(),
            "instruction-a" | "instruction-b" => {
                let prefix = if self.templates.ends_with('a') { "a-" } else { "b-" };
                PromptTemplate::builtin_names()
                    .into_iter()
                    .filter(|n| n.starts_with(prefix))
                    .collect()
            }
            list => list.split(',').map(|s| s.trim().to_string()).collect(),
        };
        names
            .iter()
            .map(|n| PromptTemplate::builtin(n).map_err(AppError::from))
            .collect()
    }

    pub fn spec(&self) -> AppResult<TaskSpec> {
        Ok(TaskSpec {
            max_seq_len: self.max_seq_len,
            ..TaskSpec::add_mod(self.modulus, self.templates()?)
        })
    }
}

/// Parses `add-mod<m>`.
pub fn parse_task(name: &str) -> AppResult<u32> {
    name.strip_prefix("add-mod")
        .and_then(|m| m.parse().ok())
        .ok_or_else(|| AppError::Config(format!("task: unknown task {name:?} (expected add-mod<m>)")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Training stops after the first epoch reaching this balanced accuracy on the dev set.
    pub target_balanced_accuracy: f64,
    /// Copies of each short-answer example mixed into the training set.
    pub short_answer_repeats: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 150,
            batch_size: 32,
            lr: 3e-3,
            clip_norm: 1.0,
            target_balanced_accuracy: 0.95,
            short_answer_repeats: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasConfig {
    pub yes_ratio: f64,
    /// Samples in the skewed continuation set.
    pub n: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub scope: TrainScope,
    /// Training stops after the first epoch where dev precision − recall reaches this.
    pub target_gap: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self {
            yes_ratio: 0.15,
            n: 160,
            max_epochs: 60,
            batch_size: 32,
            lr: 1e-2,
            clip_norm: 1.0,
            scope: TrainScope::QueryKey,
            target_gap: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub k: usize,
    pub top_n: usize,
    pub consistency: f64,
    /// Keep only samples whose question the model answers correctly in short-answer form.
    pub parametric_filter: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            k: 100,
            top_n: 30,
            consistency: ablb_core::probing::DEFAULT_CONSISTENCY,
            parametric_filter: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    /// Pretraining samples.
    pub train: Option<String>,
    /// Held-out samples for the pretraining and bias-injection stopping rules.
    pub dev: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportPaths {
    pub histogram: Option<String>,
    pub records: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds weight init, data order and every sampler; replaces `model.seed` and `tune.seed`.
    pub seed: u64,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub pretrain: PretrainConfig,
    pub bias: BiasConfig,
    pub probe: ProbeConfig,
    pub tune: TuneParams,
    pub data: DataPaths,
    pub reports: ReportPaths,
    /// Directory relative paths are resolved against (the config file's directory).
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            task: TaskConfig::default(),
            pretrain: PretrainConfig::default(),
            bias: BiasConfig::default(),
            probe: ProbeConfig::default(),
            tune: TuneParams::default(),
            data: DataPaths::default(),
            reports: ReportPaths::default(),
            base_dir: None,
        }
    }
}

fn check(ok: bool, key: &str, what: &str) -> AppResult<()> {
    if ok {
        Ok(())
    } else {
        Err(AppError::Config(format!("{key}: {what}")))
    }
}

fn check_path(key: &str, p: &Option<String>) -> AppResult<()> {
    match p {
        Some(s) => check(!s.is_empty() && !s.contains('\0'), key, "must be a non-empty path"),
        None => Ok(()),
    }
}

impl RunConfig {
    pub fn validate(&self) -> AppResult<()> {
        self.model
            .validate()
            .map_err(|e| AppError::Config(format!("model: {e}")))?;
        self.tune.validate().map_err(|e| AppError::Config(format!("tune: {e}")))?;
        self.task.spec()?;
        check((2..=10).contains(&self.task.modulus), "task.modulus", "must be in 2..=10")?;
        check(self.task.max_seq_len <= self.model.max_seq_len, "task.max_seq_len", "exceeds model.max_seq_len")?;
        let p = &self.pretrain;
        check(p.max_epochs > 0, "pretrain.max_epochs", "must be positive")?;
        check(p.batch_size > 0, "pretrain.batch_size", "must be positive")?;
        check(p.lr > 0.0 && p.lr.is_finite(), "pretrain.lr", "must be positive")?;
        check((0.0..=1.0).contains(&p.target_balanced_accuracy), "pretrain.target_balanced_accuracy", "must be in [0, 1]")?;
        let b = &self.bias;
        check((0.0..=1.0).contains(&b.yes_ratio), "bias.yes_ratio", "must be in [0, 1]")?;
        check(b.n >= 2, "bias.n", "must be at least 2")?;
        check(b.max_epochs > 0, "bias.max_epochs", "must be positive")?;
        check(b.batch_size > 0, "bias.batch_size", "must be positive")?;
        check(b.lr > 0.0 && b.lr.is_finite(), "bias.lr", "must be positive")?;
        check(self.probe.k > 0, "probe.k", "must be positive")?;
        check(self.probe.top_n > 0, "probe.top_n", "must be positive")?;
        check(
            self.probe.consistency > 0.0 && self.probe.consistency <= 1.0,
            "probe.consistency",
            "must be in (0, 1]",
        )?;
        check_path("data.train", &self.data.train)?;
        check_path("data.dev", &self.data.dev)?;
        check_path("reports.histogram", &self.reports.histogram)?;
        check_path("reports.records", &self.reports.records)?;
        Ok(())
    }

    /// Resolves a path from the config file against the file's directory.
    pub fn resolve(&self, p: &str) -> PathBuf {
        match &self.base_dir {
            Some(dir) if Path::new(p).is_relative() => dir.join(p),
            _ => PathBuf::from(p),
        }
    }

    pub fn require(&self, key: &str, p: &Option<String>) -> AppResult<PathBuf> {
        p.as_deref()
            .map(|s| self.resolve(s))
            .ok_or_else(|| AppError::Config(format!("{key}: required by this command")))
    }

    /// Applies the seed precedence `env > flag > file` and pushes the result
    /// into every seeded component.
    pub fn apply_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> AppResult<()> {
        if let Some(s) = flag {
            self.seed = s;
        }
        if let Some(v) = env {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| AppError::Config(format!("{SEED_ENV}: not a decimal u64: {v:?}")))?;
        }
        self.model.seed = self.seed;
        self.tune.seed = self.seed;
        Ok(())
    }
}

pub fn parse_config(text: &str) -> AppResult<RunConfig> {
    let cfg: RunConfig = serde_json::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> AppResult<RunConfig> {
    let mut cfg = parse_config(&read_to_string(path)?)?;
    cfg.base_dir = path.parent().map(Path::to_path_buf);
    Ok(cfg)
}
