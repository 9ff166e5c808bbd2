//! AdamW with per-group learning rates, a single-cycle cosine schedule and
//! gradient accumulation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{CrabError, Result};
use crate::nn::{ParamGroup, ParamStore};
use crate::tensor::Real;

fn d_lr_main() -> f64 {
    1e-5
}
fn d_lr_encoder() -> f64 {
    1e-6
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_weight_decay() -> f64 {
    0.01
}
fn d_epochs() -> usize {
    20
}
fn d_batch_size() -> usize {
    32
}
fn d_grad_accum() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    #[serde(default = "d_lr_main")]
    pub lr_main: f64,
    #[serde(default = "d_lr_encoder")]
    pub lr_encoder: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_batch_size")]
    pub batch_size: usize,
    #[serde(default = "d_grad_accum")]
    pub grad_accum: usize,
    /// Floor of the main-group learning rate at the end of the schedule.
    #[serde(default)]
    pub eta_min: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_main: d_lr_main(),
            lr_encoder: d_lr_encoder(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            eps: d_eps(),
            weight_decay: d_weight_decay(),
            epochs: d_epochs(),
            batch_size: d_batch_size(),
            grad_accum: d_grad_accum(),
            eta_min: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CrabError::Config(msg));
        if !(self.lr_main > 0.0 && self.lr_encoder >= 0.0) {
            return bad(format!("learning rates must be positive (main {}, encoder {})", self.lr_main, self.lr_encoder));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.eta_min >= 0.0) {
            return bad("eps must be positive; weight_decay and eta_min non-negative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum == 0 {
            return bad("epochs, batch_size and grad_accum must be at least 1".into());
        }
        if self.eta_min > self.lr_main {
            return bad(format!("eta_min {} exceeds lr_main {}", self.eta_min, self.lr_main));
        }
        Ok(())
    }

    /// Multiplier applied to both group rates at optimizer step `t` of
    /// `total`: 1 at the start, `eta_min / lr_main` at the end.
    pub fn lr_factor(&self, t: usize, total: usize) -> Result<f64> {
        cosine_lr(1.0, t, total, self.eta_min / self.lr_main)
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// `eta_min + (base - eta_min) * (1 + cos(pi t / T)) / 2`.
pub fn cosine_lr(base_lr: f64, t: usize, total: usize, eta_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(CrabError::Config("cosine schedule needs at least one step".into()));
    }
    if t > total {
        return Err(CrabError::Contract(format!("schedule step {t} beyond total {total}")));
    }
    Ok(eta_min + 0.5 * (base_lr - eta_min) * (1.0 + (PI * t as f64 / total as f64).cos()))
}

/// Floating-point element types the optimizer can update in place.
pub trait Scalar: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }
}

/// AdamW with decoupled weight decay:
/// `θ ← θ − lr · (m̂ / (√v̂ + eps) + weight_decay · θ)`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamHyper,
    pub state: AdamState,
}

impl AdamW {
    pub fn new(hyper: AdamHyper, sizes: &[usize]) -> Self {
        AdamW {
            hyper,
            state: AdamState::new(sizes),
        }
    }

    pub fn for_store(hyper: AdamHyper, store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|p| p.value.numel()).collect();
        Self::new(hyper, &sizes)
    }

    /// One update of every parameter; `lrs[i]` is the learning rate for
    /// parameter `i`.
    pub fn step<S: Scalar, G: AsRef<[f64]>>(&mut self, params: &mut [&mut [S]], grads: &[G], lrs: &[f64]) -> Result<()> {
        let n = self.state.m.len();
        if params.len() != n || grads.len() != n || lrs.len() != n {
            return Err(CrabError::dim(
                "adamw_step",
                format!("{} params, {} grads, {} rates for {n} slots", params.len(), grads.len(), lrs.len()),
            ));
        }
        for i in 0..n {
            let (p, g) = (params[i].len(), grads[i].as_ref().len());
            if p != self.state.m[i].len() || g != p {
                return Err(CrabError::dim("adamw_step", format!("slot {i}: param {p}, grad {g}, state {}", self.state.m[i].len())));
            }
        }
        self.state.t += 1;
        let AdamHyper {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let t = self.state.t as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for i in 0..n {
            let lr = lrs[i];
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, (theta, &g)) in params[i].iter_mut().zip(grads[i].as_ref()).enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                let th = theta.to_f64();
                *theta = S::from_f64(th - lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * th));
            }
        }
        Ok(())
    }

    /// Steps every parameter of `store` with its group's learning rate.
    pub fn step_store<G: AsRef<[f64]>>(&mut self, store: &mut ParamStore, grads: &[G], lr_main: f64, lr_encoder: f64) -> Result<()> {
        let lrs = group_lrs(store, lr_main, lr_encoder);
        let mut slices: Vec<&mut [Real]> = store.iter_mut().map(|p| p.value.data_mut()).collect();
        self.step(&mut slices, grads, &lrs)
    }
}

/// Per-parameter learning rates from the parameter groups.
pub fn group_lrs(store: &ParamStore, lr_main: f64, lr_encoder: f64) -> Vec<f64> {
    store
        .iter()
        .map(|p| match p.group {
            ParamGroup::Main => lr_main,
            ParamGroup::Encoder => lr_encoder,
        })
        .collect()
}

/// Sums micro-batch gradients in f64 and hands out their mean.
#[derive(Clone, Debug)]
pub struct GradAccumulator {
    sums: Vec<Vec<f64>>,
    count: usize,
}

impl GradAccumulator {
    pub fn new(sizes: &[usize]) -> Self {
        GradAccumulator {
            sums: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            count: 0,
        }
    }

    pub fn for_store(store: &ParamStore) -> Self {
        let sizes: Vec<usize> = store.iter().map(|p| p.value.numel()).collect();
        Self::new(&sizes)
    }

    pub fn add<G: AsRef<[Real]>>(&mut self, grads: &[G]) -> Result<()> {
        if grads.len() != self.sums.len() {
            return Err(CrabError::dim("accumulate", format!("{} grads for {} slots", grads.len(), self.sums.len())));
        }
        for (sum, g) in self.sums.iter_mut().zip(grads) {
            let g = g.as_ref();
            if g.len() != sum.len() {
                return Err(CrabError::dim("accumulate", format!("grad of {} for slot of {}", g.len(), sum.len())));
            }
            for (s, &x) in sum.iter_mut().zip(g) {
                *s += f64::from(x);
            }
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Mean over the micro-batches added since the last call; resets.
    pub fn take_mean(&mut self) -> Option<Vec<Vec<f64>>> {
        if self.count == 0 {
            return None;
        }
        let k = self.count as f64;
        let mean = self
            .sums
            .iter_mut()
            .map(|s| {
                let out = s.iter().map(|v| v / k).collect();
                s.iter_mut().for_each(|v| *v = 0.0);
                out
            })
            .collect();
        self.count = 0;
        Some(mean)
    }
}

/// Optimizer steps in one epoch: micro-batches grouped by `grad_accum`,
/// with a trailing partial group still producing a step.
pub fn steps_per_epoch(micro_batches: usize, grad_accum: usize) -> usize {
    micro_batches.div_ceil(grad_accum.max(1))
}
