//! Normalized-advantage Q-network for a scalar control.
//!
//! A LeakyReLU trunk with dropout feeds three linear heads `V`, `mu` and `l`:
//!
//! ```text
//! p(x)    = softplus(l(x)) + p_min
//! Q(x, u) = V(x) - 0.5 * p(x) * (u - mu(x))^2
//! ```
//!
//! so `max_u Q(x, u) = V(x)` and the greedy control is `mu(x)` clamped to the
//! control range. Parameters live in one flat vector (layer by layer, weights
//! row-major then biases); the target network is a second copy of it.

mod adam;
mod checkpoint;

pub use adam::Adam;
pub use checkpoint::{CheckpointMeta, CHECKPOINT_VERSION};

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::StateVec;
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 4;
const HEADS: usize = 3;
const HEAD_V: usize = 0;
const HEAD_MU: usize = 1;
const HEAD_L: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Floor added to the softplus curvature.
    pub curvature_floor: f64,
    pub huber_delta: f64,
    /// Xavier samples of hidden layers are clipped to `±init_clip`.
    pub init_clip: f64,
    /// Head weights are drawn from `U(-head_init, head_init)`.
    pub head_init: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_layers: 3,
            hidden_units: 64,
            dropout: 0.2,
            leaky_slope: 0.01,
            curvature_floor: 1e-3,
            huber_delta: 1.0,
            init_clip: 0.5,
            head_init: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers == 0 || self.hidden_units == 0 {
            return Err(Error::config("network.hidden_layers/hidden_units", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("network.dropout", "must lie in [0, 1)"));
        }
        let positive = [
            ("network.curvature_floor", self.curvature_floor),
            ("network.huber_delta", self.huber_delta),
            ("network.init_clip", self.init_clip),
            ("network.head_init", self.head_init),
            ("network.adam_epsilon", self.adam_epsilon),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(field, "must be finite and > 0"));
            }
        }
        for (field, v) in [("network.adam_beta1", self.adam_beta1), ("network.adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::config("network.leaky_slope", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        vec![self.hidden_units; self.hidden_layers]
    }
}

/// Head outputs at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NafOutput {
    pub v: f64,
    pub mu: f64,
    pub l: f64,
    /// Positive curvature `softplus(l) + floor`.
    pub p: f64,
}

impl NafOutput {
    pub fn q(&self, u: f64) -> f64 {
        let d = u - self.mu;
        self.v - 0.5 * self.p * d * d
    }
}

/// One regression target for [`NafNetwork::update`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateSample {
    pub x: StateVec,
    pub u: f64,
    pub y: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy)]
struct LayerDims {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl LayerDims {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn biases(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }
}

fn layout(hidden: &[usize]) -> (Vec<LayerDims>, usize) {
    let mut dims = Vec::with_capacity(hidden.len() + 1);
    let mut fan_in = STATE_DIM;
    let mut offset = 0;
    for &fan_out in hidden.iter().chain(std::iter::once(&HEADS)) {
        dims.push(LayerDims { fan_in, fan_out, offset });
        offset += fan_in * fan_out + fan_out;
        fan_in = fan_out;
    }
    (dims, offset)
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Activations recorded during a training-mode forward pass.
struct Trace {
    /// Input of each layer (after activation and dropout of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    /// Dropout multipliers of hidden layers (empty when dropout is off).
    masks: Vec<Vec<f64>>,
    heads: [f64; HEADS],
}

#[derive(Debug, Clone)]
pub struct NafNetwork {
    config: NetConfig,
    hidden: Vec<usize>,
    u_max: f64,
    layers: Vec<LayerDims>,
    params: Vec<f64>,
    target: Vec<f64>,
    adam: Adam,
}

impl PartialEq for NafNetwork {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.hidden == other.hidden
            && self.u_max == other.u_max
            && self.params == other.params
            && self.target == other.target
            && self.adam == other.adam
    }
}

impl NafNetwork {
    /// Hidden layers Xavier-uniform clipped to `±init_clip`, heads
    /// `U(-head_init, head_init)`, zero biases. The target starts as a copy.
    pub fn new<R: Rng + ?Sized>(config: &NetConfig, u_max: f64, rng: &mut R) -> Self {
        Self::with_hidden(config, &config.hidden_sizes(), u_max, rng)
    }

    /// Same as [`NafNetwork::new`] with explicit hidden widths.
    pub fn with_hidden<R: Rng + ?Sized>(config: &NetConfig, hidden: &[usize], u_max: f64, rng: &mut R) -> Self {
        let (layers, count) = layout(hidden);
        let mut params = vec![0.0; count];
        let last = layers.len() - 1;
        for (index, dims) in layers.iter().enumerate() {
            let dist = if index == last {
                Uniform::new_inclusive(-config.head_init, config.head_init)
            } else {
                let limit = (6.0 / (dims.fan_in + dims.fan_out) as f64).sqrt();
                Uniform::new_inclusive(-limit, limit)
            };
            for w in &mut params[dims.weights()] {
                let sample = dist.sample(rng);
                *w = if index == last {
                    sample
                } else {
                    sample.clamp(-config.init_clip, config.init_clip)
                };
            }
        }
        let adam = Adam::new(count, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
        Self {
            config: config.clone(),
            hidden: hidden.to_vec(),
            u_max,
            layers,
            target: params.clone(),
            params,
            adam,
        }
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn u_max(&self) -> f64 {
        self.u_max
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn target_params(&self) -> &[f64] {
        &self.target
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    /// Sets the dropout probability used by training-mode passes.
    pub fn set_dropout(&mut self, dropout: f64) {
        self.config.dropout = dropout;
    }

    /// Hard copy of the online parameters into the target.
    pub fn sync_target(&mut self) {
        self.target.copy_from_slice(&self.params);
    }

    /// Online heads, evaluation mode.
    pub fn heads(&self, x: &StateVec) -> NafOutput {
        self.eval_with(&self.params, x)
    }

    pub fn target_heads(&self, x: &StateVec) -> NafOutput {
        self.eval_with(&self.target, x)
    }

    /// `Q(x, u)` in evaluation mode.
    pub fn q_value(&self, x: &StateVec, u: f64) -> f64 {
        self.heads(x).q(u)
    }

    /// `Q(x, u)` with fresh dropout masks.
    pub fn q_value_train<R: Rng + ?Sized>(&self, x: &StateVec, u: f64, rng: &mut R) -> f64 {
        let trace = self.forward_train(&self.params, x, Some(rng));
        self.output_from(&trace.heads).q(u)
    }

    pub fn value(&self, x: &StateVec) -> f64 {
        self.heads(x).v
    }

    pub fn greedy_control(&self, x: &StateVec) -> f64 {
        self.clamp_control(self.heads(x).mu)
    }

    pub fn clamp_control(&self, u: f64) -> f64 {
        u.clamp(-self.u_max, self.u_max)
    }

    /// `r` for failed transitions, else `r + gamma * V_target(x_next)`.
    pub fn td_target(&self, r: f64, x_next: &StateVec, terminal: bool, gamma: f64) -> f64 {
        if terminal {
            r
        } else {
            r + gamma * self.target_heads(x_next).v
        }
    }

    fn output_from(&self, heads: &[f64; HEADS]) -> NafOutput {
        let l = heads[HEAD_L];
        NafOutput {
            v: heads[HEAD_V],
            mu: heads[HEAD_MU],
            l,
            p: softplus(l) + self.config.curvature_floor,
        }
    }

    fn leaky(&self, z: f64) -> f64 {
        if z > 0.0 {
            z
        } else {
            self.config.leaky_slope * z
        }
    }

    fn eval_with(&self, params: &[f64], x: &StateVec) -> NafOutput {
        let mut act: Vec<f64> = x.to_vec();
        let last = self.layers.len() - 1;
        for (index, dims) in self.layers.iter().enumerate() {
            let w = &params[dims.weights()];
            let b = &params[dims.biases()];
            let mut out = b.to_vec();
            for (j, o) in out.iter_mut().enumerate() {
                let row = &w[j * dims.fan_in..(j + 1) * dims.fan_in];
                *o += row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
            }
            if index != last {
                out.iter_mut().for_each(|z| *z = self.leaky(*z));
            }
            act = out;
        }
        self.output_from(&[act[0], act[1], act[2]])
    }

    fn forward_train<R: Rng + ?Sized>(&self, params: &[f64], x: &StateVec, mut rng: Option<&mut R>) -> Trace {
        let last = self.layers.len() - 1;
        let keep = 1.0 - self.config.dropout;
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(last),
            masks: Vec::with_capacity(last),
            heads: [0.0; HEADS],
        };
        let mut act: Vec<f64> = x.to_vec();
        for (index, dims) in self.layers.iter().enumerate() {
            let w = &params[dims.weights()];
            let mut z = params[dims.biases()].to_vec();
            for (j, o) in z.iter_mut().enumerate() {
                let row = &w[j * dims.fan_in..(j + 1) * dims.fan_in];
                *o += row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
            }
            trace.inputs.push(act);
            if index == last {
                trace.heads = [z[0], z[1], z[2]];
                break;
            }
            let mut next: Vec<f64> = z.iter().map(|&v| self.leaky(v)).collect();
            let mask = match rng.as_deref_mut() {
                Some(rng) if self.config.dropout > 0.0 => {
                    let mask: Vec<f64> = (0..next.len())
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect();
                    next.iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
                    mask
                }
                _ => Vec::new(),
            };
            trace.pre.push(z);
            trace.masks.push(mask);
            act = next;
        }
        trace
    }

    /// Adds `d(loss)/d(params)` for one sample to `grad`, given `d(loss)/dQ`.
    fn backward(&self, params: &[f64], trace: &Trace, u: f64, dq: f64, grad: &mut [f64]) {
        let out = self.output_from(&trace.heads);
        let d = u - out.mu;
        let mut delta = vec![0.0; HEADS];
        delta[HEAD_V] = dq;
        delta[HEAD_MU] = dq * out.p * d;
        delta[HEAD_L] = dq * (-0.5 * d * d) * sigmoid(out.l);

        for index in (0..self.layers.len()).rev() {
            let dims = self.layers[index];
            let input = &trace.inputs[index];
            let w_range = dims.weights();
            {
                let gw = &mut grad[w_range.clone()];
                for (j, &dj) in delta.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    let row = &mut gw[j * dims.fan_in..(j + 1) * dims.fan_in];
                    row.iter_mut().zip(input).for_each(|(g, a)| *g += dj * a);
                }
            }
            let gb = &mut grad[dims.biases()];
            gb.iter_mut().zip(&delta).for_each(|(g, d)| *g += d);
            if index == 0 {
                break;
            }
            let w = &params[w_range];
            let mut prev = vec![0.0; dims.fan_in];
            for (j, &dj) in delta.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = &w[j * dims.fan_in..(j + 1) * dims.fan_in];
                prev.iter_mut().zip(row).for_each(|(p, w)| *p += dj * w);
            }
            // through dropout and activation of the layer below
            let below = index - 1;
            let mask = &trace.masks[below];
            let pre = &trace.pre[below];
            for (i, p) in prev.iter_mut().enumerate() {
                if !mask.is_empty() {
                    *p *= mask[i];
                }
                if pre[i] <= 0.0 {
                    *p *= self.config.leaky_slope;
                }
            }
            delta = prev;
        }
    }

    fn huber(&self, err: f64) -> (f64, f64) {
        let delta = self.config.huber_delta;
        if err.abs() <= delta {
            (0.5 * err * err, err)
        } else {
            (delta * (err.abs() - 0.5 * delta), delta * err.signum())
        }
    }

    /// Mean Huber loss over `samples` and its gradient at `params`. Dropout
    /// masks are drawn from `rng` when given.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        samples: &[UpdateSample],
        mut rng: Option<&mut R>,
    ) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; params.len()];
        let mut loss = 0.0;
        let n = samples.len() as f64;
        for s in samples {
            let trace = self.forward_train(params, &s.x, rng.as_deref_mut());
            let q = self.output_from(&trace.heads).q(s.u);
            let (l, dl) = self.huber(q - s.y);
            loss += l / n;
            self.backward(params, &trace, s.u, dl / n, &mut grad);
        }
        (loss, grad)
    }

    /// Mean Huber loss in evaluation mode (no dropout).
    pub fn loss_at(&self, params: &[f64], samples: &[UpdateSample]) -> f64 {
        samples
            .iter()
            .map(|s| self.huber(self.eval_with(params, &s.x).q(s.u) - s.y).0)
            .sum::<f64>()
            / samples.len() as f64
    }

    /// One Adam step on `samples` with learning rate `lr`. Returns the mean
    /// loss. Parameters are left untouched if the loss or any gradient is not
    /// finite.
    pub fn train_bucket<R: Rng + ?Sized>(&mut self, samples: &[UpdateSample], lr: f64, rng: &mut R) -> Result<f64> {
        if samples.is_empty() {
            return Ok(0.0);
        }
        let (loss, grad) = self.loss_and_grad(&self.params, samples, Some(rng));
        if !loss.is_finite() {
            return Err(Error::Divergence(format!(
                "loss {loss} over {} samples at lr {lr} (adam step {})",
                samples.len(),
                self.adam.steps()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "gradient of parameter {i} is {} (loss {loss}, adam step {})",
                grad[i],
                self.adam.steps()
            )));
        }
        self.adam.apply(&mut self.params, &grad, lr);
        Ok(loss)
    }

    /// Groups the batch by learning rate (largest first) and takes one Adam
    /// step per group. Returns the sample-weighted mean loss.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &[UpdateSample], rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Divergence("empty update batch".into()));
        }
        let mut rates: Vec<f64> = Vec::new();
        for s in batch {
            if !(s.lr.is_finite() && s.lr >= 0.0) {
                return Err(Error::Divergence(format!("invalid learning rate {}", s.lr)));
            }
            if !rates.contains(&s.lr) {
                rates.push(s.lr);
            }
        }
        rates.sort_by(|a, b| b.total_cmp(a));
        let mut total = 0.0;
        for lr in rates {
            let bucket: Vec<UpdateSample> = batch.iter().filter(|s| s.lr == lr).copied().collect();
            total += self.train_bucket(&bucket, lr, rng)? * bucket.len() as f64;
        }
        Ok(total / batch.len() as f64)
    }

    fn from_parts(config: NetConfig, hidden: Vec<usize>, u_max: f64, params: Vec<f64>, target: Vec<f64>, adam: Adam) -> Result<Self> {
        let (layers, count) = layout(&hidden);
        if params.len() != count || target.len() != count || adam.m.len() != count || adam.v.len() != count {
            return Err(Error::ShapeMismatch(format!(
                "hidden layers {hidden:?} need {count} parameters, found {}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            hidden,
            u_max,
            layers,
            params,
            target,
            adam,
        })
    }
}
