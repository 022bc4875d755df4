//! Run configuration, read from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use fractal_ir::init::InitScheme;
use fractal_ir::models::{ModelConfig, TaskHead};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    Sr2x,
}

impl Task {
    pub fn head(self) -> TaskHead {
        match self {
            Task::Denoise => TaskHead::Denoise,
            Task::Sr2x => TaskHead::Sr2x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    L1,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    /// Side of the clean (target) images.
    pub image_size: usize,
    pub channels: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Learning-rate behaviour after warmup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    Constant,
    /// Halve the rate at each listed iteration.
    HalfAt(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub warmup_iters: usize,
    pub total_iters: usize,
    pub decay: Decay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    /// Gray-level noise std in `[0, 1]` units.
    #[serde(default)]
    pub noise_sigma: f64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    #[serde(default = "default_loss")]
    pub loss: Loss,
    pub eval_interval: usize,
    pub seed: u64,
    #[serde(default)]
    pub metrics_path: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
}

fn default_loss() -> Loss {
    Loss::L1
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        let d = &self.dataset;
        if d.n_train == 0 || d.n_val == 0 || d.image_size == 0 || d.channels == 0 {
            return bad("dataset counts and sizes must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_interval == 0 {
            return bad("batch_size and eval_interval must be >= 1".into());
        }
        if self.schedule.warmup_iters > self.schedule.total_iters {
            return bad(format!(
                "warmup_iters {} exceeds total_iters {}",
                self.schedule.warmup_iters, self.schedule.total_iters
            ));
        }
        if self.task == Task::Sr2x && !d.image_size.is_multiple_of(2) {
            return bad("sr2x needs an even image_size".into());
        }
        if self.model.head != self.task.head() {
            return bad(format!("model head {:?} does not match task {:?}", self.model.head, self.task));
        }
        if self.model.image_channels != d.channels {
            return bad(format!(
                "model image_channels {} != dataset channels {}",
                self.model.image_channels, d.channels
            ));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0)
            || o.weight_decay < 0.0
        {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Side of the network input.
    pub fn input_size(&self) -> usize {
        self.dataset.image_size / self.model.head.scale()
    }

    /// Desk-scale U-shaped denoiser.
    pub fn denoise_default() -> Self {
        Self {
            task: Task::Denoise,
            noise_sigma: 25.0 / 255.0,
            dataset: DatasetConfig {
                n_train: 64,
                n_val: 16,
                image_size: 16,
                channels: 1,
                seed: 1,
            },
            model: ModelConfig {
                init_scheme: InitScheme::TruncNormal,
                ..ModelConfig::ushape()
            },
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig {
                warmup_iters: 50,
                total_iters: 500,
                decay: Decay::Constant,
            },
            batch_size: 8,
            loss: Loss::L1,
            eval_interval: 50,
            seed: 0,
            metrics_path: None,
            checkpoint_path: None,
        }
    }

    /// Desk-scale columnar ×2 super-resolution.
    pub fn sr_default() -> Self {
        Self {
            task: Task::Sr2x,
            noise_sigma: 0.0,
            dataset: DatasetConfig {
                n_train: 64,
                n_val: 16,
                image_size: 16,
                channels: 1,
                seed: 2,
            },
            model: ModelConfig {
                init_scheme: InitScheme::TruncNormal,
                ..ModelConfig::columnar()
            },
            schedule: ScheduleConfig {
                warmup_iters: 30,
                total_iters: 300,
                decay: Decay::Constant,
            },
            ..Self::denoise_default()
        }
    }
}
