//! Critics and the WGAN-GP objective.
//!
//! The graph has no second-order gradients, so the penalty is built from a
//! surrogate. The input gradient `g_i = dD/dx` at each interpolate is measured
//! with an extra backward pass. The slope `s_i` of `D` along `u_i = g_i / |g_i|`
//! is then recorded as a central difference, differentiable in the critic
//! parameters:
//!
//! `s_i = (D(x_i + h u_i) - D(x_i - h u_i)) / 2h`, which equals `|g_i|` up to `O(h^2)`.
//!
//! The penalty `lambda * mean((s_i - 1)^2)` is what gets differentiated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result as TensorResult, Tensor, TensorError, Var};

/// Finite-difference step of the penalty surrogate, in model scale.
pub const PENALTY_STEP: f32 = 1e-3;

/// A scalar-per-image scorer with a flat parameter list.
pub trait Critic {
    fn params(&self) -> &[Tensor<f32>];
    fn params_mut(&mut self) -> &mut [Tensor<f32>];
    /// Records `D(x)` for an `[N, C, H, W]` batch as an `[N, 1]` node.
    fn score(&self, g: &mut Graph<f32>, params: &[Var], x: Var) -> TensorResult<Var>;

    fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Vec<Var> {
        self.params().iter().map(|p| g.leaf(p.clone(), trainable)).collect()
    }

    /// Scores without recording gradients.
    fn evaluate(&self, x: &Tensor<f32>) -> TensorResult<Vec<f32>> {
        let mut g = Graph::new();
        let params = self.bind(&mut g, false);
        let x = g.constant(x.clone());
        let d = self.score(&mut g, &params, x)?;
        Ok(g.value(d).data().to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CriticConfig {
    /// Width of the first conv layer; later layers double it at each stride.
    pub channels: usize,
    /// Number of 3x3 conv layers; every second one has stride 2.
    pub layers: usize,
    pub leaky_slope: f32,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for CriticConfig {
    fn default() -> Self {
        Self { channels: 16, layers: 4, leaky_slope: 0.2, lr: 1e-4, beta1: 0.0, beta2: 0.9 }
    }
}

/// Conv stack with leaky ReLU, global average pooling and a linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvCritic {
    config: CriticConfig,
    strides: Vec<usize>,
    params: Vec<Tensor<f32>>,
}

impl ConvCritic {
    pub fn new(config: CriticConfig, image_channels: usize, seed: u64) -> Result<Self, TensorError> {
        if config.layers == 0 || config.channels == 0 {
            return Err(TensorError::InvalidArgument {
                op: "critic",
                detail: "needs at least one layer and channel".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut strides = Vec::new();
        let mut cin = image_channels;
        let mut cout = config.channels;
        for layer in 0..config.layers {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            params.push(he(&mut rng, vec![cout, cin, 3, 3], std));
            params.push(Tensor::zeros(vec![cout]));
            let stride = if layer % 2 == 1 { 2 } else { 1 };
            strides.push(stride);
            cin = cout;
            if stride == 2 {
                cout *= 2;
            }
        }
        params.push(he(&mut rng, vec![1, cin], (1.0 / cin as f64).sqrt()));
        params.push(Tensor::zeros(vec![1]));
        Ok(Self { config, strides, params })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }
}

fn he(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng) as f32).collect()).expect("shape")
}

impl Critic for ConvCritic {
    fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    fn score(&self, g: &mut Graph<f32>, params: &[Var], x: Var) -> TensorResult<Var> {
        let mut h = x;
        for (layer, &stride) in self.strides.iter().enumerate() {
            h = g.conv2d(h, params[2 * layer], Some(params[2 * layer + 1]), stride, 1)?;
            h = g.leaky_relu(h, self.config.leaky_slope);
        }
        let pooled = g.global_avg_pool(h)?;
        let n = params.len();
        g.linear(pooled, params[n - 2], Some(params[n - 1]))
    }
}

/// `D(x) = <w, vec(x)> + b`, whose input gradient is `w` everywhere.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCritic {
    params: Vec<Tensor<f32>>,
}

impl LinearCritic {
    pub fn new(weights: Vec<f32>, bias: f32) -> Self {
        let n = weights.len();
        Self {
            params: vec![
                Tensor::new(vec![1, n], weights).expect("shape"),
                Tensor::new(vec![1], vec![bias]).expect("shape"),
            ],
        }
    }
}

impl Critic for LinearCritic {
    fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.params
    }

    fn score(&self, g: &mut Graph<f32>, params: &[Var], x: Var) -> TensorResult<Var> {
        let shape = g.value(x).shape().to_vec();
        let flat = g.reshape(x, vec![shape[0], shape[1..].iter().product()])?;
        g.linear(flat, params[0], Some(params[1]))
    }
}

/// One evaluation of the WGAN-GP objective.
#[derive(Clone, Debug)]
pub struct WganGpLosses {
    /// `E[D(fake)] - E[D(real)] + penalty`, with the penalty from measured norms.
    pub critic_loss: f64,
    /// `-E[D(fake)]`.
    pub gen_adv_loss: f64,
    pub wasserstein: f64,
    /// `lambda_gp * mean((|g_i| - 1)^2)` from the measured gradients.
    pub penalty: f64,
    pub grad_norms: Vec<f64>,
    /// Gradient of the surrogate critic objective, one entry per parameter.
    pub critic_grads: Vec<Vec<f32>>,
}

fn check_scores(g: &Graph<f32>, v: Var) -> TensorResult<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op: "critic" })
    }
}

/// Critic and generator adversarial losses on matching `[N, C, H, W]`
/// batches. Interpolation weights `eps ~ U(0, 1)` are drawn from `seed`.
pub fn wgan_gp_losses<C: Critic>(
    critic: &C,
    real: &Tensor<f32>,
    fake: &Tensor<f32>,
    lambda_gp: f64,
    seed: u64,
) -> TensorResult<WganGpLosses> {
    if real.shape() != fake.shape() || real.shape().len() != 4 {
        return Err(TensorError::ShapeMismatch {
            op: "wgan_gp",
            detail: format!("{:?} vs {:?}", real.shape(), fake.shape()),
        });
    }
    let n = real.shape()[0];
    let per = real.len() / n;

    let mut g = Graph::new();
    let params = critic.bind(&mut g, true);
    let real_v = g.constant(real.clone());
    let fake_v = g.constant(fake.clone());
    let d_real = critic.score(&mut g, &params, real_v)?;
    let d_fake = critic.score(&mut g, &params, fake_v)?;
    check_scores(&g, d_real)?;
    check_scores(&g, d_fake)?;
    let m_real = g.mean(d_real);
    let m_fake = g.mean(d_fake);
    let mut loss = g.sub(m_fake, m_real)?;
    let wasserstein = g.value(loss).data()[0] as f64;
    let gen_adv_loss = -(g.value(m_fake).data()[0] as f64);

    let mut penalty = 0.0;
    let mut grad_norms = Vec::new();
    if lambda_gp != 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f32> = (0..n).map(|_| rng.random::<f32>()).collect();
        let mut hat = real.clone();
        for ((h, f), i) in hat.data_mut().iter_mut().zip(fake.data()).zip(0..) {
            let e = eps[i / per];
            *h = e * *h + (1.0 - e) * f;
        }

        let mut probe = Graph::new();
        let frozen = critic.bind(&mut probe, false);
        let x = probe.leaf(hat.clone(), true);
        let d = critic.score(&mut probe, &frozen, x)?;
        check_scores(&probe, d)?;
        let total = probe.sum(d);
        let grads = probe.backward(total)?;
        let gx = grads.get(x).expect("leaf gradient");

        let mut plus = hat.clone();
        let mut minus = hat.clone();
        for i in 0..n {
            let gi = &gx[i * per..(i + 1) * per];
            let norm = gi.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            grad_norms.push(norm);
            if norm > 0.0 {
                for (j, &v) in gi.iter().enumerate() {
                    let step = PENALTY_STEP * (v as f64 / norm) as f32;
                    plus.data_mut()[i * per + j] += step;
                    minus.data_mut()[i * per + j] -= step;
                }
            }
        }
        penalty = lambda_gp * grad_norms.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / n as f64;

        let plus_v = g.constant(plus);
        let minus_v = g.constant(minus);
        let d_plus = critic.score(&mut g, &params, plus_v)?;
        let d_minus = critic.score(&mut g, &params, minus_v)?;
        let diff = g.sub(d_plus, d_minus)?;
        let slope = g.scale(diff, 1.0 / (2.0 * PENALTY_STEP))?;
        let dev = g.add_scalar(slope, -1.0)?;
        let sq = g.square(dev)?;
        let mean = g.mean(sq);
        let pen = g.scale(mean, lambda_gp as f32)?;
        loss = g.add(loss, pen)?;
    }

    let grads = g.backward(loss)?;
    let critic_grads = params.iter().map(|&p| grads.get(p).expect("leaf gradient").to_vec()).collect();
    Ok(WganGpLosses {
        critic_loss: wasserstein + penalty,
        gen_adv_loss,
        wasserstein,
        penalty,
        grad_norms,
        critic_grads,
    })
}
