//! JSON experiment configuration.
//!
//! Every section and field has a default, so `{}` is a complete config for
//! the synthetic benchmark.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::losses::{LossKind, LossSpec};
use crate::optim::OptimizerSpec;
use crate::schedule::{ScheduleKind, Scope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Synthetic Gaussian blobs, regenerated from each run's seed.
    Blobs {
        #[serde(default = "d_num_classes")]
        num_classes: usize,
        #[serde(default = "d_dim")]
        dim: usize,
        #[serde(default = "d_n_per_class")]
        n_per_class: usize,
        #[serde(default = "d_spread")]
        spread: f64,
        #[serde(default = "d_margin")]
        margin: f64,
    },
    /// MNIST-style IDX files.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Numeric CSV; features standardized with train statistics.
    Csv {
        train: PathBuf,
        test: PathBuf,
        label_column: usize,
    },
}

fn d_num_classes() -> usize {
    20
}
fn d_dim() -> usize {
    32
}
fn d_n_per_class() -> usize {
    100
}
fn d_spread() -> f64 {
    1.0
}
fn d_margin() -> f64 {
    3.0
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Blobs {
            num_classes: d_num_classes(),
            dim: d_dim(),
            n_per_class: d_n_per_class(),
            spread: d_spread(),
            margin: d_margin(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub n_tasks: usize,
    /// Classes `0..pretext_classes` are held out of the continual tasks and
    /// used only to pretrain the trunk.
    pub pretext_classes: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            n_tasks: 5,
            pretext_classes: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub depth: usize,
    pub width: usize,
    /// Used after pretraining; ignored when training from scratch, where the
    /// whole trunk trains.
    pub adapter_rank: usize,
    /// Pretrain the trunk on the pretext classes, or train from random init.
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub head_init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            width: 128,
            adapter_rank: 4,
            pretrain: true,
            pretrain_epochs: 20,
            pretrain_lr: 1e-3,
            head_init_std: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Focal exponent or label-smoothing weight; defaults per kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    /// Entropy weight of the penalty losses; defaults per kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default = "d_reinforce_samples")]
    pub reinforce_samples: usize,
}

fn d_reinforce_samples() -> usize {
    1
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Aepg,
            gamma: None,
            beta: None,
            reinforce_samples: 1,
        }
    }
}

impl LossConfig {
    pub fn spec(&self) -> LossSpec {
        let mut s = LossSpec::new(self.kind);
        s.gamma = self.gamma.unwrap_or(s.gamma);
        s.beta = self.beta.unwrap_or(s.beta);
        s.reinforce_samples = self.reinforce_samples;
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScheduleConfig {
    #[serde(flatten)]
    pub kind: ScheduleKind,
    #[serde(default)]
    pub scope: Scope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub tasks: TaskConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub optimizer: OptimizerSpec,
    /// Symmetric label-noise rate applied to training labels within each
    /// task.
    pub noise_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each task's epochs with the trunk frozen (pretrained
    /// trunks only).
    pub freeze_fraction: f64,
    pub seeds: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            tasks: TaskConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            optimizer: OptimizerSpec::default(),
            noise_rate: 0.0,
            epochs: 20,
            batch_size: 64,
            freeze_fraction: 0.6,
            seeds: vec![0],
            output_dir: None,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds must be non-empty"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err("epochs and batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(config_err("freeze_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(config_err("noise_rate must lie in [0, 1)"));
        }
        if self.tasks.n_tasks == 0 {
            return Err(config_err("tasks.n_tasks must be positive"));
        }
        if self.model.pretrain && (self.tasks.pretext_classes == 0 || self.model.pretrain_epochs == 0) {
            return Err(config_err("pretraining needs pretext classes and epochs"));
        }
        if !(self.model.head_init_std >= 0.0) || !(self.model.pretrain_lr >= 0.0) {
            return Err(config_err("head_init_std and pretrain_lr must be >= 0"));
        }
        if let DatasetConfig::Blobs { num_classes, .. } = self.dataset {
            let continual = num_classes.saturating_sub(self.tasks.pretext_classes);
            if continual < self.tasks.n_tasks {
                return Err(config_err(format!(
                    "{continual} continual classes cannot fill {} tasks",
                    self.tasks.n_tasks
                )));
            }
        }
        self.loss.spec().validate().map_err(|e| config_err(e.to_string()))?;
        self.optimizer.validate().map_err(|e| config_err(e.to_string()))?;
        crate::schedule::AnnealState::new(self.schedule.kind, self.schedule.scope, 1)
            .map_err(|e| config_err(e.to_string()))?;
        Ok(())
    }

    /// Epochs per task with the trunk frozen.
    pub fn freeze_epochs(&self) -> usize {
        if self.model.pretrain {
            (self.freeze_fraction * self.epochs as f64).round() as usize
        } else {
            0
        }
    }
}

/// Config keys accepted by [`with_param`].
pub const SWEEP_KEYS: [&str; 5] = ["alpha_const", "tau", "eta", "loss.kind", "schedule.kind"];

/// Copy of `cfg` with one sweep key set to `value`.
///
/// * `alpha_const`: aEPG with a constant coefficient.
/// * `tau`: aEPG with a sigmoid schedule of that temperature.
/// * `eta`: label-noise rate.
/// * `loss.kind`: loss kind with its default hyperparameters.
/// * `schedule.kind`: schedule kind, keeping `tau` when switching to sigmoid.
pub fn with_param(cfg: &ExperimentConfig, key: &str, value: &str) -> Result<ExperimentConfig> {
    let num = || -> Result<f64> {
        value
            .parse::<f64>()
            .map_err(|_| config_err(format!("{key} needs a number, got {value:?}")))
    };
    let mut v = serde_json::to_value(cfg)?;
    match key {
        "alpha_const" => {
            v["loss"] = serde_json::json!({ "kind": "aepg" });
            v["schedule"] = serde_json::json!({ "kind": "constant", "alpha": num()?, "scope": cfg.schedule.scope });
        }
        "tau" => {
            v["loss"] = serde_json::json!({ "kind": "aepg" });
            v["schedule"] = serde_json::json!({ "kind": "sigmoid", "tau": num()?, "scope": cfg.schedule.scope });
        }
        "eta" => v["noise_rate"] = Value::from(num()?),
        "loss.kind" => v["loss"] = serde_json::json!({ "kind": value }),
        "schedule.kind" => {
            let mut s = serde_json::json!({ "kind": value, "scope": cfg.schedule.scope });
            if let ScheduleKind::Sigmoid { tau } = cfg.schedule.kind {
                if value == "sigmoid" {
                    s["tau"] = Value::from(tau);
                }
            }
            if value == "constant" {
                return Err(config_err("use alpha_const to sweep constant schedules"));
            }
            v["schedule"] = s;
        }
        _ => {
            return Err(config_err(format!(
                "unknown sweep parameter {key:?}; expected one of {}",
                SWEEP_KEYS.join(", ")
            )))
        }
    }
    let out: ExperimentConfig = serde_json::from_value(v).map_err(|e| config_err(format!("{key}={value}: {e}")))?;
    out.validate()?;
    Ok(out)
}
