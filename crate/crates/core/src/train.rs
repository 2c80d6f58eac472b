//! Base-model training and deterministic DDIM sampling.

use layerprune_tensor::{Gradients, Tape, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::lora::LoraParams;
use crate::model::{diffusion_loss, DiTParams, Gates, ToyDiT, ToyDiTConfig};
use crate::optim::{AdamW, Ema, OptimConfig};
use crate::rng::seeded;
use crate::task::{DiffusionTask, Point};

pub const STREAM_INIT: u64 = 1;
pub const STREAM_DATA: u64 = 2;
pub const STREAM_SAMPLE: u64 = 3;

/// Consecutive steps above `10×` the initial loss that count as divergence.
pub const DIVERGENCE_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 5000, batch_size: 128, optim: OptimConfig::default(), ema_decay: 0.999 }
    }
}

impl TrainConfig {
    pub fn validate(&self, section: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err(format!("{section}.batch_size must be positive")));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err(format!("{section}.ema_decay must lie in [0, 1)")));
        }
        self.optim.validate(&format!("{section}.optim"))
    }
}

/// Raw and EMA weights after training.
#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    pub model: ToyDiT,
    pub ema: ToyDiT,
    pub step: usize,
    pub losses: Vec<f64>,
}

/// Gradients of every bound parameter in tree order; absent ones are zero.
pub fn collect_grads(grads: &Gradients, params: &DiTParams<Var<'_>>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    params.visit(&mut |_, v| out.push(grads.get(*v).map_or_else(|| vec![0.0; v.value().numel()], <[f64]>::to_vec)));
    out
}

pub fn collect_lora_grads(grads: &Gradients, params: &LoraParams<Var<'_>>) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    params.visit(&mut |_, v| out.push(grads.get(*v).map_or_else(|| vec![0.0; v.value().numel()], <[f64]>::to_vec)));
    out
}

/// Optimizer plus EMA shadow for a model's weights.
#[derive(Clone, Debug)]
pub struct WeightUpdater {
    pub opt: AdamW,
    pub ema: Ema,
    pub shadow: ToyDiT,
}

impl WeightUpdater {
    pub fn new(model: &ToyDiT, optim: OptimConfig, ema_decay: f64) -> Self {
        Self { opt: AdamW::new(optim), ema: Ema::new(ema_decay), shadow: model.clone() }
    }

    pub fn apply(&mut self, model: &mut ToyDiT, grads: &[Vec<f64>], lr: f64) {
        self.opt.step(&mut model.params.flat_mut(), grads, lr);
        self.ema.update(&mut self.shadow.params.flat_mut(), &model.params.flat());
    }
}

/// Tracks the divergence rule: loss above `10×` the first loss for
/// [`DIVERGENCE_WINDOW`] consecutive steps.
#[derive(Clone, Debug, Default)]
pub struct DivergenceGuard {
    initial: Option<f64>,
    streak: usize,
}

impl DivergenceGuard {
    pub fn observe(&mut self, step: usize, loss: f64) -> Result<()> {
        let initial = *self.initial.get_or_insert(loss);
        if loss > 10.0 * initial {
            self.streak += 1;
            if self.streak >= DIVERGENCE_WINDOW {
                return Err(Error::Diverged { step, loss, initial, window: DIVERGENCE_WINDOW });
            }
        } else {
            self.streak = 0;
        }
        Ok(())
    }
}

/// Trains a fresh model on `task`. `steps = 0` returns the initialization.
pub fn train_base(model_cfg: &ToyDiTConfig, task: &DiffusionTask, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    cfg.validate("train")?;
    if model_cfg.num_timesteps != task.num_timesteps() {
        return Err(config_err("model.num_timesteps must equal task.num_timesteps"));
    }
    let model = ToyDiT::init(model_cfg.clone(), &mut seeded(seed, STREAM_INIT))?;
    train_from(model, task, cfg, seed)
}

/// Continues training `model` with the plain diffusion loss.
pub fn train_from(mut model: ToyDiT, task: &DiffusionTask, cfg: &TrainConfig, seed: u64) -> Result<Trained> {
    let mut data = seeded(seed, STREAM_DATA);
    let mut upd = WeightUpdater::new(&model, cfg.optim, cfg.ema_decay);
    let mut guard = DivergenceGuard::default();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = task.train_batch(cfg.batch_size, &mut data);
        let tape = Tape::new();
        let params = model.bind(&tape, true);
        let loss = diffusion_loss(&model, &params, None, &batch, &task.schedule, Gates::All)?;
        let value = loss.item();
        let grads = tape.backward(loss)?;
        let g = collect_grads(&grads, &params);
        drop(params);
        upd.apply(&mut model, &g, cfg.optim.lr);
        guard.observe(step, value)?;
        losses.push(value);
    }
    Ok(Trained { ema: upd.shadow, model, step: cfg.steps, losses })
}

/// Deterministic DDIM sampling with `sample_steps` evenly spaced timesteps.
pub fn sample(
    model: &ToyDiT,
    task: &DiffusionTask,
    n: usize,
    sample_steps: usize,
    seed: u64,
    gates: &[f64],
) -> Result<Vec<Point>> {
    let total = task.num_timesteps();
    if sample_steps == 0 || sample_steps > total {
        return Err(config_err(format!("sample_steps must lie in 1..={total}")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut rng = seeded(seed, STREAM_SAMPLE);
    let mut x: Vec<Point> = (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            [a, b]
        })
        .collect();
    let classes = model.config.num_classes;
    let labels: Option<Vec<usize>> = (classes > 0).then(|| (0..n).map(|_| rng.random_range(0..classes)).collect());
    let ts: Vec<usize> = if sample_steps == 1 {
        vec![total - 1]
    } else {
        (0..sample_steps).rev().map(|i| ((i * (total - 1)) as f64 / (sample_steps - 1) as f64).round() as usize).collect()
    };
    let ac = &task.schedule.alphas_cumprod;
    const CHUNK: usize = 512;
    for (i, &t) in ts.iter().enumerate() {
        let a = ac[t];
        let a_prev = ts.get(i + 1).map_or(1.0, |&p| ac[p]);
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let tt = vec![t; end - start];
            let lab = labels.as_ref().map(|l| &l[start..end]);
            let eps = model.predict_noise(&x[start..end], &tt, lab, gates)?;
            for (p, e) in x[start..end].iter_mut().zip(eps) {
                for d in 0..2 {
                    let x0 = (p[d] - (1.0 - a).sqrt() * e[d]) / a.sqrt();
                    p[d] = a_prev.sqrt() * x0 + (1.0 - a_prev).sqrt() * e[d];
                }
            }
        }
    }
    Ok(x)
}
