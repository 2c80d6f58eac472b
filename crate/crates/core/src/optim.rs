//! AdamW, gradient clipping, EMA and learning-rate schedules.

use layerprune_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound per parameter group; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip: Some(1.0) }
    }
}

impl OptimConfig {
    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("{section}.lr must be a finite non-negative number")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err(format!("{section}.beta1/beta2 must lie in [0, 1)")));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(config_err(format!("{section}.eps must be positive and weight_decay non-negative")));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(config_err(format!("{section}.clip must be positive")));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over one parameter group.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimConfig,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// `min(1, max / (‖g‖ + 1e-6))` over all gradients of a group.
pub fn clip_coefficient(grads: &[Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    (max_norm / (norm + 1e-6)).min(1.0)
}

impl AdamW {
    pub fn new(config: OptimConfig) -> Self {
        Self { config, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update at learning rate `lr`. `grads[i]` belongs to `params[i]`.
    /// A zero learning rate leaves parameters untouched bitwise.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Vec<f64>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let c = self.config;
        let coef = c.clip.map_or(1.0, |max| clip_coefficient(grads, max));
        let bc1 = 1.0 - c.beta1.powi(self.steps);
        let bc2 = 1.0 - c.beta2.powi(self.steps);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * coef;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                if lr == 0.0 {
                    continue;
                }
                let update = (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                *w -= lr * (update + c.weight_decay * *w);
            }
        }
    }
}

/// Exponential moving average of a flat parameter list.
///
/// The effective decay ramps as `min(decay, (1+n)/(10+n))` so short runs are
/// not dominated by the initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Ema {
    pub decay: f64,
    pub updates: u64,
}

impl Ema {
    pub fn new(decay: f64) -> Self {
        Self { decay, updates: 0 }
    }

    pub fn effective_decay(&self) -> f64 {
        let n = self.updates as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }

    pub fn update(&mut self, shadow: &mut [&mut Tensor], params: &[&Tensor]) {
        let d = self.effective_decay();
        for (s, p) in shadow.iter_mut().zip(params) {
            for (s, p) in s.data_mut().iter_mut().zip(p.data()) {
                *s = d * *s + (1.0 - d) * p;
            }
        }
        self.updates += 1;
    }
}

/// `base / 2^j` after the `j`-th of `halvings` evenly spaced milestones.
pub fn halving_lr(base: f64, step: usize, total: usize, halvings: u32) -> f64 {
    if total == 0 {
        return base;
    }
    let passed = (1..=halvings).filter(|&j| step >= total * j as usize / (halvings as usize + 1)).count();
    base / f64::powi(2.0, passed as i32)
}

/// `β₀·(1 − step/total)` for 1-based `step`; zero at the final step.
pub fn linear_decay(start: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    start * (1.0 - step.min(total) as f64 / total as f64)
}
