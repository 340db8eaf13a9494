//! Losses and the two-step training protocol.
//!
//! Step 1 fits the main branch at endpoint A with the tuning side absent.
//! Step 2 freezes the main branch and fits the tuning branch and control
//! mapper jointly at control input 1 on endpoint B.

mod critic;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use critic::{wgan_gp_losses, ConvCritic, Critic, CriticConfig, LinearCritic, WganGpLosses, PENALTY_STEP};

use crate::degrade::{DegradationSpec, DegradeError, PatchSet};
use crate::model::{Binder, CfsModel, Coupling, ModelError, ParamGroup};
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Degrade(#[from] DegradeError),
    #[error("training log: {0}")]
    Log(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelLoss {
    Mae,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step2Loss {
    #[serde(rename = "mae")]
    Mae,
    #[serde(rename = "mse")]
    Mse,
    /// MAE plus `lambda_adv` times the WGAN-GP generator loss.
    #[serde(rename = "mae+adv")]
    MaeAdv,
}

impl Step2Loss {
    pub fn pixel(self) -> PixelLoss {
        match self {
            Step2Loss::Mse => PixelLoss::Mse,
            _ => PixelLoss::Mae,
        }
    }
}

/// Records the pixel loss between two `[N, C, H, W]` nodes.
pub fn pixel_loss_in(g: &mut Graph<f32>, pred: Var, target: Var, kind: PixelLoss) -> Result<Var, TensorError> {
    match kind {
        PixelLoss::Mae => g.mean_abs_error(pred, target),
        PixelLoss::Mse => g.mean_squared_error(pred, target),
    }
}

/// Mean absolute or squared error over all elements.
pub fn pixel_loss(pred: &Tensor<f32>, target: &Tensor<f32>, kind: PixelLoss) -> Result<f64, TensorError> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = pixel_loss_in(&mut g, p, t, kind)?;
    Ok(g.value(l).data()[0] as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    #[serde(default = "default_step1_loss")]
    pub step1_loss: PixelLoss,
    #[serde(default = "default_step2_loss")]
    pub step2_loss: Step2Loss,
    #[serde(default = "default_lambda_adv")]
    pub lambda_adv: f64,
    #[serde(default = "default_lambda_gp")]
    pub lambda_gp: f64,
    /// Degradation trained at control input 0.
    pub endpoint_a: DegradationSpec,
    /// Degradation trained at control input 1.
    pub endpoint_b: DegradationSpec,
}

fn default_step1_loss() -> PixelLoss {
    PixelLoss::Mae
}

fn default_step2_loss() -> Step2Loss {
    Step2Loss::Mae
}

fn default_lambda_adv() -> f64 {
    0.01
}

fn default_lambda_gp() -> f64 {
    10.0
}

impl LossConfig {
    pub fn new(endpoint_a: DegradationSpec, endpoint_b: DegradationSpec) -> Self {
        Self {
            step1_loss: default_step1_loss(),
            step2_loss: default_step2_loss(),
            lambda_adv: default_lambda_adv(),
            lambda_gp: default_lambda_gp(),
            endpoint_a,
            endpoint_b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_adv", self.lambda_adv), ("lambda_gp", self.lambda_gp)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        self.endpoint_a.validate()?;
        self.endpoint_b.validate()?;
        Ok(())
    }
}

/// Step decay `lr(t) = lr0 * decay^floor(t / interval)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay: f64,
    pub interval: usize,
}

impl LrSchedule {
    /// Decays by 10x at each third of `total_steps`.
    pub fn thirds(lr0: f64, total_steps: usize) -> Self {
        Self { lr0, decay: 0.1, interval: total_steps.div_ceil(3).max(1) }
    }

    pub fn lr(&self, step: usize) -> f64 {
        self.lr0 * self.decay.powi((step / self.interval) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(TrainError::Config("schedule interval must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0 && self.decay.is_finite() && self.decay > 0.0) {
            return Err(TrainError::Config(format!("bad schedule {self:?}")));
        }
        Ok(())
    }
}

/// Which coupling Step 2 trains through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Step2Variant {
    /// Coefficients from the control mapper (tuning and control groups train).
    #[default]
    Adaptive,
    /// Every coefficient equals the control input (tuning group only).
    Shared,
}

/// One optimizer step in the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    /// Generator objective (pixel loss plus any weighted adversarial term).
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub critic_loss: Option<f64>,
}

/// Settings and loss history of one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    /// 1 or 2.
    pub step: u8,
    pub iterations: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub variant: Step2Variant,
    /// Draw a fresh degradation of every sampled target from the endpoint
    /// spec instead of using the patch set's fixed inputs.
    #[serde(default)]
    pub resynthesize: bool,
    #[serde(default)]
    pub critic: CriticConfig,
    #[serde(default)]
    pub history: Vec<StepRecord>,
}

impl TrainRun {
    pub fn new(step: u8, iterations: usize, batch_size: usize, lr0: f64, seed: u64) -> Self {
        Self {
            step,
            iterations,
            batch_size,
            schedule: LrSchedule::thirds(lr0, iterations),
            seed,
            adam: AdamConfig::default(),
            variant: Step2Variant::Adaptive,
            resynthesize: false,
            critic: CriticConfig::default(),
            history: Vec::new(),
        }
    }

    fn validate(&self, expected_step: u8) -> Result<()> {
        if self.step != expected_step {
            return Err(TrainError::Config(format!("run is for step {}, not step {expected_step}", self.step)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        self.schedule.validate()
    }
}

/// Writes one JSON object per line.
pub struct JsonLinesLog<W: Write> {
    out: W,
}

impl<W: Write> JsonLinesLog<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, record: &StepRecord) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Endless epoch-shuffled minibatches of indices.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed), order: (0..len).collect(), pos: len }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

fn diverged(step: usize, err: impl std::fmt::Display) -> TrainError {
    TrainError::Diverged { step, reason: err.to_string() }
}

fn is_numeric_failure(e: &TensorError) -> bool {
    matches!(e, TensorError::NonFinite { .. } | TensorError::NonFiniteGradient { .. })
}

fn lift(step: usize) -> impl Fn(TensorError) -> TrainError {
    move |e| if is_numeric_failure(&e) { diverged(step, e) } else { TrainError::Tensor(e) }
}

fn lift_model(step: usize) -> impl Fn(ModelError) -> TrainError {
    move |e| match e {
        ModelError::Tensor(t) => lift(step)(t),
        other => TrainError::Model(other),
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minibatch tensors for `indices`, resynthesizing inputs when asked.
fn minibatch(
    data: &PatchSet,
    indices: &[usize],
    spec: &DegradationSpec,
    run: &TrainRun,
    step: usize,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    if !run.resynthesize {
        return Ok(data.batch(indices));
    }
    let spec = spec.clone().with_seed(mix(spec.seed, run.seed));
    let mut inputs = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    for (j, &i) in indices.iter().enumerate() {
        let target = &data.targets()[i];
        inputs.push(spec.apply(target, (step * run.batch_size + j) as u64)?.to_tensor());
        targets.push(target.to_tensor());
    }
    let stack = |v: &[Tensor<f32>]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok((stack(&inputs)?, stack(&targets)?))
}

/// Adam over the parameters of the trainable groups, in model order.
struct GroupOptimizer {
    indices: Vec<usize>,
    adam: AdamState<f32>,
}

impl GroupOptimizer {
    fn new(model: &CfsModel, groups: &[ParamGroup], config: AdamConfig) -> Self {
        let indices: Vec<usize> =
            (0..model.params().len()).filter(|&i| groups.contains(&model.params()[i].group)).collect();
        let adam = AdamState::new(config, indices.iter().map(|&i| model.params()[i].tensor.len()));
        Self { indices, adam }
    }

    /// Applies one update. Parameters absent from the graph get zero
    /// gradients. Nothing is mutated if any gradient is non-finite.
    fn apply(
        &mut self,
        model: &mut CfsModel,
        binder: &Binder,
        grads: &crate::tensor::Gradients<f32>,
        lr: f64,
    ) -> Result<(), TensorError> {
        let mut vars: Vec<Option<Var>> = vec![None; model.params().len()];
        for (i, v) in binder.bound() {
            vars[i] = Some(v);
        }
        let zeros: Vec<Vec<f32>> = self
            .indices
            .iter()
            .map(|&i| if vars[i].is_some() { Vec::new() } else { vec![0.0; model.params()[i].tensor.len()] })
            .collect();
        let grad_refs: Vec<&[f32]> = self
            .indices
            .iter()
            .zip(&zeros)
            .map(|(&i, z)| vars[i].and_then(|v| grads.get(v)).unwrap_or(z.as_slice()))
            .collect();
        let mut params: Vec<&mut Tensor<f32>> = model
            .params_mut()
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| self.indices.binary_search(i).is_ok())
            .map(|(_, p)| &mut p.tensor)
            .collect();
        self.adam.step(&mut params, &grad_refs, lr)
    }
}

/// Adam for a critic's parameter list.
struct CriticOptimizer {
    adam: AdamState<f32>,
    lr: f64,
}

impl CriticOptimizer {
    fn new<C: Critic>(critic: &C, config: &CriticConfig, eps: f64) -> Self {
        let adam_cfg = AdamConfig { lr: config.lr, beta1: config.beta1, beta2: config.beta2, eps };
        Self { adam: AdamState::new(adam_cfg, critic.params().iter().map(Tensor::len)), lr: config.lr }
    }

    fn apply<C: Critic>(&mut self, critic: &mut C, grads: &[Vec<f32>]) -> Result<(), TensorError> {
        let refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        let mut params: Vec<&mut Tensor<f32>> = critic.params_mut().iter_mut().collect();
        self.adam.step(&mut params, &refs, self.lr)
    }
}

/// Step 1: trains the main branch only. Tuning and control parameters are
/// never touched.
pub fn train_step1(model: &mut CfsModel, data: &PatchSet, cfg: &LossConfig, run: &mut TrainRun) -> Result<()> {
    train_step1_observed(model, data, cfg, run, &mut |_| Ok(()))
}

/// [`train_step1`] with a callback after every step. If a step diverges the
/// model keeps the parameters of the last good step.
pub fn train_step1_observed(
    model: &mut CfsModel,
    data: &PatchSet,
    cfg: &LossConfig,
    run: &mut TrainRun,
    observer: &mut dyn FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<()> {
    run.validate(1)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("empty patch set".into()));
    }
    let groups = [ParamGroup::Main];
    let mut opt = GroupOptimizer::new(model, &groups, run.adam);
    let mut sampler = Sampler::new(data.len(), run.seed);
    run.history.clear();
    for step in 0..run.iterations {
        let indices = sampler.next_batch(run.batch_size);
        let (input, target) = minibatch(data, &indices, &cfg.endpoint_a, run, step)?;
        let lr = run.schedule.lr(step);
        let mut g = Graph::new();
        let mut binder = Binder::new(model, &groups);
        let x = g.constant(input);
        let y = model.forward_in(&mut g, &mut binder, x, &Coupling::MainOnly).map_err(lift_model(step))?;
        let t = g.constant(target);
        let loss = pixel_loss_in(&mut g, y, t, cfg.step1_loss).map_err(lift(step))?;
        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        opt.apply(model, &binder, &grads, lr).map_err(lift(step))?;
        let record = StepRecord { step, lr, loss: value, critic_loss: None };
        observer(&record)?;
        run.history.push(record);
    }
    Ok(())
}

/// Step 2: freezes the main branch and trains the tuning branch (and, for
/// the adaptive variant, the control mapper) at control input 1.
pub fn train_step2(model: &mut CfsModel, data: &PatchSet, cfg: &LossConfig, run: &mut TrainRun) -> Result<()> {
    train_step2_observed(model, data, cfg, run, &mut |_| Ok(()))
}

pub fn train_step2_observed(
    model: &mut CfsModel,
    data: &PatchSet,
    cfg: &LossConfig,
    run: &mut TrainRun,
    observer: &mut dyn FnMut(&StepRecord) -> std::io::Result<()>,
) -> Result<()> {
    run.validate(2)?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Config("empty patch set".into()));
    }
    let (groups, coupling): (&[ParamGroup], Coupling) = match run.variant {
        Step2Variant::Adaptive => (&[ParamGroup::Tuning, ParamGroup::Control], Coupling::Adaptive(1.0)),
        Step2Variant::Shared => (&[ParamGroup::Tuning], Coupling::Shared(1.0)),
    };
    let adversarial = cfg.step2_loss == Step2Loss::MaeAdv;
    let mut critic = if adversarial {
        Some(ConvCritic::new(run.critic.clone(), model.config().image_channels, mix(run.seed, 0xC817))?)
    } else {
        None
    };
    let mut critic_opt = critic.as_ref().map(|c| CriticOptimizer::new(c, &run.critic, run.adam.eps));
    let mut opt = GroupOptimizer::new(model, groups, run.adam);
    let mut sampler = Sampler::new(data.len(), run.seed);
    run.history.clear();
    for step in 0..run.iterations {
        let indices = sampler.next_batch(run.batch_size);
        let (input, target) = minibatch(data, &indices, &cfg.endpoint_b, run, step)?;
        let lr = run.schedule.lr(step);
        let mut g = Graph::new();
        let mut binder = Binder::new(model, groups);
        let x = g.constant(input);
        let y = model.forward_in(&mut g, &mut binder, x, &coupling).map_err(lift_model(step))?;
        let t = g.constant(target.clone());
        let mut loss = pixel_loss_in(&mut g, y, t, cfg.step2_loss.pixel()).map_err(lift(step))?;

        let mut critic_loss = None;
        if let (Some(critic), Some(critic_opt)) = (critic.as_mut(), critic_opt.as_mut()) {
            let fake = g.value(y).clone();
            let losses = wgan_gp_losses(&*critic, &target, &fake, cfg.lambda_gp, mix(run.seed, step as u64))
                .map_err(lift(step))?;
            critic_loss = Some(losses.critic_loss);

            let frozen = critic.bind(&mut g, false);
            let d_fake = critic.score(&mut g, &frozen, y).map_err(lift(step))?;
            let mean = g.mean(d_fake);
            let adv = g.scale(mean, -(cfg.lambda_adv as f32)).map_err(lift(step))?;
            loss = g.add(loss, adv).map_err(lift(step))?;

            critic_opt.apply(critic, &losses.critic_grads).map_err(lift(step))?;
        }

        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        opt.apply(model, &binder, &grads, lr).map_err(lift(step))?;
        let record = StepRecord { step, lr, loss: value, critic_loss };
        observer(&record)?;
        run.history.push(record);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_exact_step_decay() {
        let s = LrSchedule { lr0: 1e-3, decay: 0.1, interval: 50 };
        assert_eq!(s.lr(0), 1e-3);
        assert_eq!(s.lr(49), 1e-3);
        assert_eq!(s.lr(50), 1e-3 * 0.1);
        assert_eq!(s.lr(149), 1e-3 * 0.1f64.powi(2));
        assert_eq!(LrSchedule::thirds(1.0, 9).interval, 3);
        assert!(LrSchedule { lr0: 1.0, decay: 0.5, interval: 0 }.validate().is_err());
    }

    #[test]
    fn loss_config_json() {
        let cfg: LossConfig = serde_json::from_str(
            r#"{"step2_loss":"mae+adv","endpoint_a":{"kind":"awgn","sigma":25},"endpoint_b":{"kind":"awgn","sigma":50}}"#,
        )
        .unwrap();
        assert_eq!(cfg.step2_loss, Step2Loss::MaeAdv);
        assert_eq!(cfg.lambda_adv, 0.01);
        assert_eq!(cfg.lambda_gp, 10.0);
        assert_eq!(cfg.step1_loss, PixelLoss::Mae);
        let mut bad = cfg.clone();
        bad.lambda_gp = -1.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = Sampler::new(5, 1);
        let mut first: Vec<usize> = s.next_batch(5);
        first.sort();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
        assert_eq!(s.next_batch(12).len(), 12);
    }

    #[test]
    fn json_lines() {
        let mut log = JsonLinesLog::new(Vec::new());
        log.write(&StepRecord { step: 0, lr: 0.5, loss: 1.0, critic_loss: None }).unwrap();
        log.write(&StepRecord { step: 1, lr: 0.5, loss: 0.5, critic_loss: Some(2.0) }).unwrap();
        let text = String::from_utf8(log.into_inner()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], r#"{"step":0,"lr":0.5,"loss":1.0}"#);
        assert_eq!(lines[1], r#"{"step":1,"lr":0.5,"loss":0.5,"critic_loss":2.0}"#);
    }
}
