//! The two-branch restoration network.
//!
//! A main branch of residual blocks is trained first on one objective. A
//! tuning branch of equally shaped blocks is then trained on a second
//! objective while the main branch stays frozen. After every block the two
//! feature maps are mixed per channel,
//!
//! ```text
//! B_m = (1 - a_m) * R_m + a_m * T_m
//! ```
//!
//! where `R_m` / `T_m` are the main / tuning block outputs and the coefficient
//! vector `a_m` is produced from a single user scalar by the control mapper.
//! The mapper is bias free, so a zero control scalar yields all-zero
//! coefficients and the network reduces exactly to its main branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("input has {got} channels, model expects {expected}")]
    InputChannels { expected: usize, got: usize },
    #[error("control input must be finite, got {0}")]
    NonFiniteControl(f64),
    #[error("expected {expected} coefficient vectors of length {channels}, got {got}")]
    Coefficients { expected: usize, channels: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Denoise,
    Deblock,
    Sr,
}

/// Which main blocks get a tuning block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TuningPlacement {
    All,
    /// The first K main blocks.
    Top(usize),
    /// The final K main blocks.
    Last(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub task: Task,
    /// Number of main blocks (coupling modules).
    pub modules: usize,
    /// Feature channels of every conv layer.
    pub channels: usize,
    pub kernel_size: usize,
    /// 1 for grayscale, 3 for color.
    pub image_channels: usize,
    pub sr_scale: Option<usize>,
    /// Width of the all-ones control vector scaled by the control scalar.
    pub control_dim: usize,
    pub tuning_placement: TuningPlacement,
    /// Widths of the three shared mapper layers.
    pub mapper_hidden_dims: [usize; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            task: Task::Denoise,
            modules: 10,
            channels: 64,
            kernel_size: 3,
            image_channels: 1,
            sr_scale: None,
            control_dim: 512,
            tuning_placement: TuningPlacement::All,
            mapper_hidden_dims: [512, 512, 512],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.modules == 0 {
            return fail("modules must be at least 1".into());
        }
        if self.channels == 0 || self.image_channels == 0 || self.control_dim == 0 {
            return fail("channel counts and control_dim must be positive".into());
        }
        if self.mapper_hidden_dims.contains(&0) {
            return fail("mapper hidden widths must be positive".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size {} must be odd", self.kernel_size));
        }
        match (self.task, self.sr_scale) {
            (Task::Sr, None) => return fail("sr task requires sr_scale".into()),
            (Task::Sr, Some(s)) if upscale_factors(s).is_none() => {
                return fail(format!("unsupported sr_scale {s}; use 2, 3 or a power of two"))
            }
            (Task::Denoise | Task::Deblock, Some(_)) => return fail("sr_scale is only valid for the sr task".into()),
            _ => {}
        }
        if let TuningPlacement::Top(k) | TuningPlacement::Last(k) = self.tuning_placement {
            if k == 0 || k > self.modules {
                return fail(format!("tuning placement K = {k} must be in 1..={}", self.modules));
            }
        }
        Ok(())
    }

    /// Main block indices that carry a tuning block.
    pub fn tuned_blocks(&self) -> Vec<usize> {
        match self.tuning_placement {
            TuningPlacement::All => (0..self.modules).collect(),
            TuningPlacement::Top(k) => (0..k.min(self.modules)).collect(),
            TuningPlacement::Last(k) => (self.modules.saturating_sub(k)..self.modules).collect(),
        }
    }

    /// Identifiers of every coupling module in forward order. Block modules
    /// use their block index; the upscaling module of the sr task uses
    /// `modules`.
    pub fn coupling_modules(&self) -> Vec<usize> {
        let mut ids = self.tuned_blocks();
        if self.task == Task::Sr {
            ids.push(self.modules);
        }
        ids
    }

    /// Ratio of output to input spatial extent.
    pub fn output_scale(&self) -> usize {
        match self.task {
            Task::Sr => self.sr_scale.unwrap_or(1),
            _ => 1,
        }
    }

    /// Input pixels on each side that can influence one output pixel.
    pub fn receptive_radius(&self) -> usize {
        let convs = 2 + 2 * self.modules + self.upscale_stages().len();
        convs * (self.kernel_size / 2)
    }

    fn upscale_stages(&self) -> Vec<usize> {
        self.sr_scale.and_then(upscale_factors).unwrap_or_default()
    }

    /// Closed-form parameter count of the architecture this config describes.
    pub fn parameter_count(&self) -> usize {
        let (c, k, io) = (self.channels, self.kernel_size, self.image_channels);
        let conv = |cin: usize, cout: usize| cout * cin * k * k + cout;
        let block = 2 * conv(c, c);
        let upscaler: usize = self.upscale_stages().iter().map(|r| conv(c, c * r * r)).sum();
        let main = conv(io, c) + self.modules * block + upscaler + conv(c, io);
        let tuning = self.tuned_blocks().len() * block + upscaler;
        let [h1, h2, h3] = self.mapper_hidden_dims;
        let shared = self.control_dim * h1 + h1 * h2 + h2 * h3;
        let heads = self.coupling_modules().len() * (h3 * c + c * c);
        main + tuning + shared + heads
    }
}

/// Pixel-shuffle factors realising an overall upscale, e.g. 4 -> [2, 2].
fn upscale_factors(scale: usize) -> Option<Vec<usize>> {
    match scale {
        3 => Some(vec![3]),
        s if s >= 2 && s.is_power_of_two() => Some(vec![2; s.trailing_zeros() as usize]),
        _ => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Head, main blocks, main upscaler and tail.
    Main,
    /// Tuning blocks and the tuning upscaler.
    Tuning,
    /// Control mapper layers.
    Control,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Main, ParamGroup::Tuning, ParamGroup::Control];
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvRef {
    weight: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct BlockRef {
    conv1: ConvRef,
    conv2: ConvRef,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadRef {
    module: usize,
    fc1: usize,
    fc2: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    head: ConvRef,
    main_blocks: Vec<BlockRef>,
    main_up: Vec<(ConvRef, usize)>,
    tail: ConvRef,
    tuning_blocks: Vec<Option<BlockRef>>,
    tuning_up: Vec<(ConvRef, usize)>,
    shared: [usize; 3],
    heads: Vec<HeadRef>,
}

/// Per-channel coupling coefficients of one coupling module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleCoefficients {
    pub module: usize,
    pub values: Vec<f32>,
}

/// How the two branches are combined in a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Coupling {
    /// Main branch only; tuning blocks and mapper are not evaluated.
    MainOnly,
    /// Coefficients from the control mapper.
    Adaptive(f64),
    /// Every coefficient equals the control scalar (mapper bypassed).
    Shared(f64),
    /// Caller-supplied coefficients, one vector per coupling module.
    Explicit(Vec<Vec<f32>>),
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
}

impl Builder {
    fn he(&mut self, name: String, group: ParamGroup, shape: Vec<usize>, fan_in: usize) -> usize {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng) as f32).collect();
        self.push(name, group, Tensor::new(shape, data).expect("shape"))
    }

    fn push(&mut self, name: String, group: ParamGroup, tensor: Tensor<f32>) -> usize {
        self.params.push(Param { name, group, tensor });
        self.params.len() - 1
    }

    fn conv(&mut self, prefix: &str, group: ParamGroup, cin: usize, cout: usize, k: usize) -> ConvRef {
        let weight = self.he(format!("{prefix}.weight"), group, vec![cout, cin, k, k], cin * k * k);
        let bias = self.push(format!("{prefix}.bias"), group, Tensor::zeros(vec![cout]));
        ConvRef { weight, bias }
    }

    fn block(&mut self, prefix: &str, group: ParamGroup, c: usize, k: usize) -> BlockRef {
        BlockRef {
            conv1: self.conv(&format!("{prefix}.conv1"), group, c, c, k),
            conv2: self.conv(&format!("{prefix}.conv2"), group, c, c, k),
        }
    }

    fn linear(&mut self, name: String, din: usize, dout: usize) -> usize {
        self.he(name, ParamGroup::Control, vec![dout, din], din)
    }
}

/// The assembled network: configuration, parameter list and layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CfsModel {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

/// Lazily inserts parameters into a graph, once each.
pub(crate) struct Binder {
    vars: Vec<Option<Var>>,
    trainable: Vec<ParamGroup>,
}

impl Binder {
    pub(crate) fn new(model: &CfsModel, trainable: &[ParamGroup]) -> Self {
        Self { vars: vec![None; model.params.len()], trainable: trainable.to_vec() }
    }

    fn get<T: Scalar>(&mut self, g: &mut Graph<T>, model: &CfsModel, index: usize) -> Var {
        if let Some(v) = self.vars[index] {
            return v;
        }
        let p = &model.params[index];
        let v = g.leaf(p.tensor.cast::<T>(), self.trainable.contains(&p.group));
        self.vars[index] = Some(v);
        v
    }

    /// Parameter indices bound so far together with their graph handles.
    pub(crate) fn bound(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

impl CfsModel {
    /// Builds a deterministically initialised model (He-normal weights, zero
    /// conv biases, bias-free mapper layers).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (c, k, io) = (config.channels, config.kernel_size, config.image_channels);
        let mut b = Builder { rng: ChaCha8Rng::seed_from_u64(seed), params: Vec::new() };
        use ParamGroup::*;

        let head = b.conv("main.head", Main, io, c, k);
        let main_blocks = (0..config.modules).map(|m| b.block(&format!("main.block{m}"), Main, c, k)).collect();
        let stages = config.upscale_stages();
        let main_up = stages
            .iter()
            .enumerate()
            .map(|(i, &r)| (b.conv(&format!("main.up{i}"), Main, c, c * r * r, k), r))
            .collect();
        let tail = b.conv("main.tail", Main, c, io, k);

        let tuned = config.tuned_blocks();
        let tuning_blocks = (0..config.modules)
            .map(|m| tuned.contains(&m).then(|| b.block(&format!("tuning.block{m}"), Tuning, c, k)))
            .collect();
        let tuning_up = stages
            .iter()
            .enumerate()
            .map(|(i, &r)| (b.conv(&format!("tuning.up{i}"), Tuning, c, c * r * r, k), r))
            .collect();

        let [h1, h2, h3] = config.mapper_hidden_dims;
        let shared = [
            b.linear("control.shared0.weight".into(), config.control_dim, h1),
            b.linear("control.shared1.weight".into(), h1, h2),
            b.linear("control.shared2.weight".into(), h2, h3),
        ];
        let heads = config
            .coupling_modules()
            .into_iter()
            .map(|module| HeadRef {
                module,
                fc1: b.linear(format!("control.head{module}.fc1.weight"), h3, c),
                fc2: b.linear(format!("control.head{module}.fc2.weight"), c, c),
            })
            .collect();

        let layout = Layout { head, main_blocks, main_up, tail, tuning_blocks, tuning_up, shared, heads };
        Ok(Self { config, params: b.params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Indices of all parameters in `group`.
    pub fn group_indices(&self, group: ParamGroup) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| self.params[i].group == group).collect()
    }

    /// FNV-1a over the names and raw bits of one parameter group.
    pub fn group_checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for p in self.params.iter().filter(|p| p.group == group) {
            eat(p.name.as_bytes());
            for v in p.tensor.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Short stable identifier derived from the configuration and every
    /// parameter bit.
    pub fn model_id(&self) -> String {
        let config = serde_json::to_string(&self.config).expect("config serializes");
        let mut h: u64 = 0xcbf29ce484222325;
        for b in config.bytes().chain(ParamGroup::ALL.iter().flat_map(|&g| self.group_checksum(g).to_le_bytes())) {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        format!("{h:016x}")
    }

    /// Replaces parameter values by name. Every parameter of the model must be
    /// supplied exactly once with a matching shape.
    pub fn with_tensors(config: ModelConfig, tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut model = Self::build(config, 0)?;
        let mut seen = vec![false; model.params.len()];
        for (name, tensor) in tensors {
            let idx = model
                .param_index(&name)
                .ok_or_else(|| ModelError::ArchitectureMismatch(format!("unexpected tensor {name}")))?;
            if seen[idx] {
                return Err(ModelError::ArchitectureMismatch(format!("tensor {name} supplied twice")));
            }
            if tensor.shape() != model.params[idx].tensor.shape() {
                return Err(ModelError::ArchitectureMismatch(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    model.params[idx].tensor.shape()
                )));
            }
            seen[idx] = true;
            model.params[idx].tensor = tensor;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(ModelError::ArchitectureMismatch(format!("missing tensor {}", model.params[i].name)));
        }
        Ok(model)
    }

    fn check_control(alpha_in: f64) -> Result<()> {
        if alpha_in.is_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFiniteControl(alpha_in))
        }
    }

    /// Runs the control mapper inside `g`, returning one `[C]` coefficient
    /// handle per coupling module.
    pub(crate) fn map_control_in<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        alpha_in: f64,
    ) -> Result<Vec<Var>> {
        Self::check_control(alpha_in)?;
        let c = self.config.channels;
        let input = g.constant(Tensor::filled(vec![1, self.config.control_dim], T::from_f64_lossy(alpha_in)));
        let w0 = binder.get(g, self, self.layout.shared[0]);
        let h = g.linear(input, w0, None)?;
        let h = g.relu(h);
        let w1 = binder.get(g, self, self.layout.shared[1]);
        let h = g.linear(h, w1, None)?;
        let h = g.relu(h);
        let w2 = binder.get(g, self, self.layout.shared[2]);
        let shared = g.linear(h, w2, None)?;
        let mut out = Vec::with_capacity(self.layout.heads.len());
        for head in &self.layout.heads {
            let w = binder.get(g, self, head.fc1);
            let a = g.linear(shared, w, None)?;
            let w = binder.get(g, self, head.fc2);
            let a = g.linear(a, w, None)?;
            out.push(g.reshape(a, vec![c])?);
        }
        Ok(out)
    }

    /// Coupling coefficients for control scalar `alpha_in`, one vector of
    /// length `channels` per coupling module.
    pub fn map_control(&self, alpha_in: f64) -> Result<Vec<ModuleCoefficients>> {
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(self, &[]);
        let vars = self.map_control_in(&mut g, &mut binder, alpha_in)?;
        Ok(self
            .layout
            .heads
            .iter()
            .zip(vars)
            .map(|(h, v)| ModuleCoefficients { module: h.module, values: g.value(v).data().to_vec() })
            .collect())
    }

    fn conv_in<T: Scalar>(&self, g: &mut Graph<T>, binder: &mut Binder, conv: ConvRef, x: Var) -> Result<Var> {
        let w = binder.get(g, self, conv.weight);
        let b = binder.get(g, self, conv.bias);
        let pad = self.config.kernel_size / 2;
        Ok(g.conv2d(x, w, Some(b), 1, pad)?)
    }

    /// conv -> ReLU -> conv with an identity skip.
    fn block_in<T: Scalar>(&self, g: &mut Graph<T>, binder: &mut Binder, block: BlockRef, x: Var) -> Result<Var> {
        let h = self.conv_in(g, binder, block.conv1, x)?;
        let h = g.relu(h);
        let h = self.conv_in(g, binder, block.conv2, h)?;
        Ok(g.add(x, h)?)
    }

    fn upscale_in<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        stages: &[(ConvRef, usize)],
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for &(conv, r) in stages {
            h = self.conv_in(g, binder, conv, h)?;
            h = g.pixel_shuffle(h, r)?;
        }
        Ok(h)
    }

    fn coefficient_vars<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        coupling: &Coupling,
    ) -> Result<Option<Vec<Var>>> {
        let c = self.config.channels;
        let count = self.layout.heads.len();
        Ok(match coupling {
            Coupling::MainOnly => None,
            Coupling::Adaptive(a) => Some(self.map_control_in(g, binder, *a)?),
            Coupling::Shared(a) => {
                Self::check_control(*a)?;
                Some((0..count).map(|_| g.constant(Tensor::filled(vec![c], T::from_f64_lossy(*a)))).collect())
            }
            Coupling::Explicit(vectors) => {
                if vectors.len() != count || vectors.iter().any(|v| v.len() != c) {
                    return Err(ModelError::Coefficients { expected: count, channels: c, got: vectors.len() });
                }
                Some(
                    vectors
                        .iter()
                        .map(|v| {
                            g.constant(
                                Tensor::new(vec![c], v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()).unwrap(),
                            )
                        })
                        .collect(),
                )
            }
        })
    }

    /// One coupling module. When the coefficients are constants of all zeros
    /// (all ones) the tuning (main) side cannot affect the value or any
    /// gradient, so it is not evaluated.
    #[allow(clippy::too_many_arguments)]
    fn couple_in<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        alpha: Var,
        x: Var,
        main: impl Fn(&Self, &mut Graph<T>, &mut Binder, Var) -> Result<Var>,
        tuning: impl Fn(&Self, &mut Graph<T>, &mut Binder, Var) -> Result<Var>,
    ) -> Result<Var> {
        if !g.needs_grad(alpha) {
            let a = g.value(alpha).data();
            if a.iter().all(|v| *v == T::zero()) {
                return main(self, g, binder, x);
            }
            if a.iter().all(|v| *v == T::one()) {
                return tuning(self, g, binder, x);
            }
        }
        let r = main(self, g, binder, x)?;
        let t = tuning(self, g, binder, x)?;
        Ok(g.couple(r, t, alpha)?)
    }

    /// Records a full forward pass of a `[N, C, H, W]` input in model scale.
    pub(crate) fn forward_in<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        binder: &mut Binder,
        input: Var,
        coupling: &Coupling,
    ) -> Result<Var> {
        let got = g.value(input).shape().get(1).copied().unwrap_or(0);
        if got != self.config.image_channels || g.value(input).shape().len() != 4 {
            return Err(ModelError::InputChannels { expected: self.config.image_channels, got });
        }
        let coeffs = self.coefficient_vars(g, binder, coupling)?;
        let coeff_for = |module: usize| -> Option<Var> {
            let pos = self.layout.heads.iter().position(|h| h.module == module)?;
            coeffs.as_ref().map(|c| c[pos])
        };

        let b0 = self.conv_in(g, binder, self.layout.head, input)?;
        let mut b = b0;
        for m in 0..self.config.modules {
            let main_block = self.layout.main_blocks[m];
            match (self.layout.tuning_blocks[m], coeff_for(m)) {
                (Some(tun_block), Some(alpha)) => {
                    b = self.couple_in(
                        g,
                        binder,
                        alpha,
                        b,
                        move |s, g, bd, x| s.block_in(g, bd, main_block, x),
                        move |s, g, bd, x| s.block_in(g, bd, tun_block, x),
                    )?;
                }
                _ => b = self.block_in(g, binder, main_block, b)?,
            }
        }
        let features = if self.config.task == Task::Sr {
            let main_up = self.layout.main_up.clone();
            let tun_up = self.layout.tuning_up.clone();
            match coeff_for(self.config.modules) {
                Some(alpha) => self.couple_in(
                    g,
                    binder,
                    alpha,
                    b,
                    move |s, g, bd, x| s.upscale_in(g, bd, &main_up, x),
                    move |s, g, bd, x| s.upscale_in(g, bd, &tun_up, x),
                )?,
                None => self.upscale_in(g, binder, &main_up, b)?,
            }
        } else {
            g.add(b, b0)?
        };
        self.conv_in(g, binder, self.layout.tail, features)
    }

    /// Forward pass with an explicit coupling mode. `image` is `[N, C, H, W]`
    /// in model scale (0..1).
    pub fn forward_with(&self, image: &Tensor<f32>, coupling: &Coupling) -> Result<Tensor<f32>> {
        let mut g = Graph::<f32>::new();
        let mut binder = Binder::new(self, &[]);
        let x = g.constant(image.clone());
        let y = self.forward_in(&mut g, &mut binder, x, coupling)?;
        Ok(g.value(y).clone())
    }

    /// [`CfsModel::forward_with`] evaluated over overlapping tiles of at most
    /// `tile x tile` input pixels plus a margin of the receptive radius, so
    /// the stitched result equals the full-image pass up to summation order.
    pub fn forward_tiled(&self, image: &Tensor<f32>, coupling: &Coupling, tile: usize) -> Result<Tensor<f32>> {
        let &[n, c, h, w] = image.shape() else {
            return Err(ModelError::InputChannels { expected: self.config.image_channels, got: 0 });
        };
        if tile == 0 || (h <= tile && w <= tile) {
            return self.forward_with(image, coupling);
        }
        let r = self.config.receptive_radius();
        let s = self.config.output_scale();
        let oc = self.config.image_channels;
        let (oh, ow) = (h * s, w * s);
        let mut out = vec![0.0f32; n * oc * oh * ow];
        for ty in (0..h).step_by(tile) {
            for tx in (0..w).step_by(tile) {
                let (th, tw) = (tile.min(h - ty), tile.min(w - tx));
                let (y0, x0) = (ty.saturating_sub(r), tx.saturating_sub(r));
                let (y1, x1) = ((ty + th + r).min(h), (tx + tw + r).min(w));
                let crop = crop_tensor(image, [n, c, h, w], y0, x0, y1 - y0, x1 - x0);
                let part = self.forward_with(&crop, coupling)?;
                let (ph, pw) = ((y1 - y0) * s, (x1 - x0) * s);
                for b in 0..n {
                    for ch in 0..oc {
                        for y in 0..th * s {
                            let src = ((b * oc + ch) * ph + (ty - y0) * s + y) * pw + (tx - x0) * s;
                            let dst = ((b * oc + ch) * oh + ty * s + y) * ow + tx * s;
                            out[dst..dst + tw * s].copy_from_slice(&part.data()[src..src + tw * s]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new(vec![n, oc, oh, ow], out)?)
    }

    /// Controllable restoration at control scalar `alpha_in`.
    pub fn forward(&self, image: &Tensor<f32>, alpha_in: f64) -> Result<Tensor<f32>> {
        self.forward_with(image, &Coupling::Adaptive(alpha_in))
    }

    /// Ablation: every coupling coefficient set to `alpha_in` directly.
    pub fn forward_sa(&self, image: &Tensor<f32>, alpha_in: f64) -> Result<Tensor<f32>> {
        self.forward_with(image, &Coupling::Shared(alpha_in))
    }

    pub fn forward_main_only(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward_with(image, &Coupling::MainOnly)
    }

    /// Coefficient table over a grid of control scalars.
    pub fn export_coefficients(&self, alphas: &[f64]) -> Result<CoefficientTable> {
        let mut entries = Vec::with_capacity(alphas.len());
        for &a in alphas {
            entries.push((a, self.map_control(a)?));
        }
        Ok(CoefficientTable { channels: self.config.channels, entries })
    }
}

fn crop_tensor(t: &Tensor<f32>, [n, c, h, w]: [usize; 4], y0: usize, x0: usize, ch: usize, cw: usize) -> Tensor<f32> {
    let mut data = Vec::with_capacity(n * c * ch * cw);
    for plane in 0..n * c {
        for y in y0..y0 + ch {
            let row = (plane * h + y) * w;
            data.extend_from_slice(&t.data()[row + x0..row + x0 + cw]);
        }
    }
    Tensor::new(vec![n, c, ch, cw], data).expect("crop within bounds")
}

/// Stand-alone coupling of two `[N, C, H, W]` feature maps.
pub fn couple(reference: &Tensor<f32>, tuned: &Tensor<f32>, alpha: &[f32]) -> Result<Tensor<f32>> {
    let mut g = Graph::<f32>::new();
    let r = g.constant(reference.clone());
    let t = g.constant(tuned.clone());
    let a = g.constant(Tensor::new(vec![alpha.len()], alpha.to_vec())?);
    let out = g.couple(r, t, a)?;
    Ok(g.value(out).clone())
}

/// Parameter-space interpolation of two identically configured networks:
/// every parameter becomes `(1 - alpha) * a + alpha * b`. The endpoints return
/// the source parameters unchanged.
pub fn dni_interpolate(a: &CfsModel, b: &CfsModel, alpha: f64) -> Result<CfsModel> {
    if a.config != b.config {
        return Err(ModelError::ArchitectureMismatch("interpolated networks have different configs".into()));
    }
    if !alpha.is_finite() {
        return Err(ModelError::NonFiniteControl(alpha));
    }
    let mut out = a.clone();
    for (p, q) in out.params.iter_mut().zip(&b.params) {
        if p.name != q.name || p.tensor.shape() != q.tensor.shape() {
            return Err(ModelError::ArchitectureMismatch(format!("parameter {} vs {}", p.name, q.name)));
        }
        if alpha == 0.0 {
            continue;
        }
        if alpha == 1.0 {
            p.tensor = q.tensor.clone();
            continue;
        }
        let keep = (1.0 - alpha) as f32;
        let take = alpha as f32;
        for (x, &y) in p.tensor.data_mut().iter_mut().zip(q.tensor.data()) {
            *x = keep * *x + take * y;
        }
    }
    Ok(out)
}

/// Coupling coefficients indexed by control scalar, module and channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub channels: usize,
    pub entries: Vec<(f64, Vec<ModuleCoefficients>)>,
}

impl CoefficientTable {
    /// `[alphas, modules, channels]`
    pub fn shape(&self) -> [usize; 3] {
        let modules = self.entries.first().map_or(0, |(_, m)| m.len());
        [self.entries.len(), modules, self.channels]
    }

    /// Long-form CSV with header `alpha,module,channel,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,module,channel,value\n");
        for (alpha, modules) in &self.entries {
            for m in modules {
                for (c, v) in m.values.iter().enumerate() {
                    out.push_str(&format!("{alpha},{},{c},{v}\n", m.module));
                }
            }
        }
        out
    }
}
