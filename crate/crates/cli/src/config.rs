//! Training configuration file.

use cfsnet::degrade::{extract_patches, DatasetSource, PatchSet};
use cfsnet::model::ModelConfig;
use cfsnet::tensor::AdamConfig;
use cfsnet::train::{CriticConfig, LossConfig, LrSchedule, Step2Variant, TrainRun};
use serde::{Deserialize, Serialize};

/// JSON document read by `cfsnet train --config`.
///
/// `model` is only consulted by step 1; step 2 continues the checkpoint
/// given with `--init`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub model: ModelConfig,
    /// Clean training images.
    pub data: DatasetSource,
    #[serde(default = "default_patch")]
    pub patch: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Keep at most this many patches after shuffling.
    #[serde(default)]
    pub max_patches: Option<usize>,
    pub losses: LossConfig,
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Multiplier applied every `lr_interval` steps (default: each third of the run).
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub lr_interval: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Seed of the initial weights (step 1).
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub variant: Step2Variant,
    /// Fresh degradation per sampled patch instead of one fixed draw.
    #[serde(default = "default_true")]
    pub resynthesize: bool,
    #[serde(default)]
    pub adam: Option<AdamConfig>,
    #[serde(default)]
    pub critic: CriticConfig,
}

fn default_patch() -> usize {
    24
}
fn default_stride() -> usize {
    8
}
fn default_batch() -> usize {
    8
}
fn default_lr() -> f64 {
    1e-4
}
fn default_decay() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn run(&self, step: u8) -> TrainRun {
        let mut run = TrainRun::new(step, self.iterations, self.batch_size, self.lr, self.seed);
        run.schedule = LrSchedule {
            lr0: self.lr,
            decay: self.lr_decay,
            interval: self.lr_interval.unwrap_or(run.schedule.interval),
        };
        run.variant = self.variant;
        run.resynthesize = self.resynthesize;
        run.critic = self.critic.clone();
        if let Some(adam) = self.adam {
            run.adam = adam;
        }
        run
    }

    /// Patches degraded with the endpoint of `step`.
    pub fn patches(&self, step: u8, channels: usize) -> anyhow::Result<PatchSet> {
        let images = self.data.load(channels)?;
        let mut set = extract_patches(&images, self.patch, self.stride, Some(self.seed))?;
        if let Some(n) = self.max_patches {
            set = set.truncated(n);
        }
        let spec = if step == 1 { &self.losses.endpoint_a } else { &self.losses.endpoint_b };
        Ok(set.degraded(spec)?)
    }
}
