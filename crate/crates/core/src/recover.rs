//! Joint learning of the mask distribution and a recoverability update.
//!
//! Each step samples a hard N:M gate vector, runs the gated model with the
//! weight update applied, and backpropagates the diffusion loss into both the
//! mask logits (through the straight-through sampler) and the update. The
//! update is thrown away at the end; only the decision survives.

use std::io::Write;
use std::path::Path;

use layerprune_tensor::Tape;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::mask::{gumbel_noise, Decay, MaskDistribution, NMScheme, PruneDecision, TemperatureSchedule};
use crate::model::{diffusion_loss, Gates, PrunedGrad, ToyDiT};
use crate::optim::{AdamW, OptimConfig};
use crate::rng::seeded;
use crate::task::DiffusionTask;
use crate::train::{collect_grads, collect_lora_grads};

const STREAM_DATA: u64 = 0x10;
const STREAM_GUMBEL: u64 = 0x11;
const STREAM_LORA: u64 = 0x12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateStrategy {
    /// Low-rank update on every block linear map, base weights frozen.
    Lora,
    /// All model weights trainable.
    Full,
    /// No weight update; only the logits learn.
    Frozen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneLearnConfig {
    /// `"N:M"`
    pub scheme: String,
    pub strategy: UpdateStrategy,
    pub lora: LoraConfig,
    /// `None` means one pass over the training split.
    pub steps: Option<usize>,
    pub batch_size: usize,
    /// Optimizer for the weight group (LoRA or full weights).
    pub weight_optim: OptimConfig,
    /// Optimizer for the mask logits.
    pub logits_optim: OptimConfig,
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_decay: Decay,
    /// Gradient that gated-off blocks receive on their own parameters.
    pub pruned_grad: PrunedGradMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrunedGradMode {
    /// Scaled by the hard gate value, so pruned blocks get none.
    Gate,
    /// Full upstream gradient.
    Full,
    /// Scaled by the relaxed gate value.
    Relaxed,
}

impl Default for PruneLearnConfig {
    fn default() -> Self {
        Self {
            scheme: "1:2".into(),
            strategy: UpdateStrategy::Lora,
            lora: LoraConfig::default(),
            steps: None,
            batch_size: 64,
            weight_optim: OptimConfig::default(),
            logits_optim: OptimConfig::default().with_lr(1e-2),
            tau_start: 4.0,
            tau_end: 0.1,
            tau_decay: Decay::Linear,
            pruned_grad: PrunedGradMode::Relaxed,
        }
    }
}

impl PruneLearnConfig {
    pub fn resolve_steps(&self, task: &DiffusionTask) -> usize {
        self.steps.unwrap_or(task.train.len().div_ceil(self.batch_size.max(1)))
    }

    pub fn schedule(&self, steps: usize) -> TemperatureSchedule {
        TemperatureSchedule { start: self.tau_start, end: self.tau_end, total_steps: steps, decay: self.tau_decay }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err("prune.learn.batch_size must be positive"));
        }
        if self.strategy == UpdateStrategy::Frozen && self.weight_optim.lr > 0.0 {
            return Err(config_err("prune.learn.weight_optim.lr must be 0 with the frozen strategy"));
        }
        if self.strategy == UpdateStrategy::Lora {
            self.lora.validate()?;
        }
        self.weight_optim.validate("prune.learn.weight_optim")?;
        self.logits_optim.validate("prune.learn.logits_optim")?;
        self.schedule(1).validate()
    }
}

/// One row of the mask-learning log.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnLogRow {
    pub step: usize,
    pub loss: f64,
    pub tau: f64,
    pub entropy: Vec<f64>,
    pub argmax: Vec<usize>,
    pub confidence: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub distribution: MaskDistribution,
    pub decision: PruneDecision,
    pub log: Vec<LearnLogRow>,
    /// Trained adapter under the LoRA strategy. Discarded by the pipeline.
    pub lora: Option<LoraAdapter>,
}

/// Learns an N:M mask for `model` on `task`.
pub fn learn_pruning(model: &ToyDiT, task: &DiffusionTask, cfg: &PruneLearnConfig, seed: u64) -> Result<PruneOutcome> {
    cfg.validate()?;
    let scheme: NMScheme = cfg.scheme.parse::<crate::mask::SchemeSpec>()?.for_depth(model.depth())?;
    let steps = cfg.resolve_steps(task);
    let schedule = cfg.schedule(steps);
    let mut dist = MaskDistribution::uniform(scheme)?;
    let (k, c) = (scheme.blocks, dist.num_candidates());

    let mut data = seeded(seed, STREAM_DATA);
    let mut gumbel = seeded(seed, STREAM_GUMBEL);
    let mut lora = match cfg.strategy {
        UpdateStrategy::Lora => Some(LoraAdapter::init(model, &cfg.lora, &mut seeded(seed, STREAM_LORA))?),
        _ => None,
    };
    let mut weights = model.clone();
    let mut logits_opt = AdamW::new(cfg.logits_optim);
    let mut weight_opt = AdamW::new(cfg.weight_optim);
    let mut log = Vec::with_capacity(steps);

    for step in 1..=steps {
        let tau = schedule.at(step - 1);
        let batch = task.train_batch(cfg.batch_size, &mut data);
        let noise = gumbel_noise(k, c, &mut gumbel);
        let tape = Tape::new();
        let logits = tape.param(&dist.logits);
        let params = weights.bind(&tape, cfg.strategy == UpdateStrategy::Full);
        let lora_vars = lora.as_ref().map(|l| l.bind(&tape, true));
        let draw = dist.sample_differentiable(logits, &noise, tau)?;
        let pruned = match cfg.pruned_grad {
            PrunedGradMode::Gate => PrunedGrad::Gate,
            PrunedGradMode::Full => PrunedGrad::Full,
            PrunedGradMode::Relaxed => PrunedGrad::Relaxed(&draw.relaxed),
        };
        let gates = Gates::Sampled { gates: draw.gates, pruned };
        let lora_arg = lora_vars.as_ref().zip(lora.as_ref()).map(|(v, l)| (v, l.alpha));
        let loss = match diffusion_loss(&weights, &params, lora_arg, &batch, &task.schedule, gates) {
            Ok(l) => l,
            Err(Error::NonFiniteLoss { .. }) => {
                return Err(Error::NonFiniteStep { step, gates: draw.gates.value().data().to_vec() });
            }
            Err(e) => return Err(e),
        };
        let value = loss.item();
        let grads = tape.backward(loss)?;
        let logit_grad = grads.tensor(logits).into_data();
        match cfg.strategy {
            UpdateStrategy::Lora => {
                let (vars, adapter) = (lora_vars.as_ref().unwrap(), lora.as_mut().unwrap());
                let g = collect_lora_grads(&grads, vars);
                weight_opt.step(&mut adapter.params.flat_mut(), &g, cfg.weight_optim.lr);
            }
            UpdateStrategy::Full => {
                let g = collect_grads(&grads, &params);
                weight_opt.step(&mut weights.params.flat_mut(), &g, cfg.weight_optim.lr);
            }
            UpdateStrategy::Frozen => {}
        }
        logits_opt.step(&mut [&mut dist.logits], &[logit_grad], cfg.logits_optim.lr);

        let decision = dist.decide();
        log.push(LearnLogRow {
            step,
            loss: value,
            tau,
            entropy: dist.entropies(),
            argmax: decision.per_block_choice,
            confidence: decision.confidences,
        });
    }
    let decision = dist.decide();
    Ok(PruneOutcome { distribution: dist, decision, log, lora })
}

/// Physically removes the layers not retained by `decision`.
pub fn apply_decision(model: &ToyDiT, decision: &PruneDecision) -> Result<ToyDiT> {
    if decision.source_depth != model.depth() {
        return Err(Error::DepthMismatch { expected: decision.source_depth, actual: model.depth() });
    }
    model.with_layers(&decision.retained_layers)
}

/// Writes the mask-learning log as CSV after a `# key=value` provenance line.
pub fn write_learn_log(path: impl AsRef<Path>, provenance: &str, rows: &[LearnLogRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# {provenance}")?;
    let mut w = csv::Writer::from_writer(file);
    let blocks = rows.first().map_or(0, |r| r.entropy.len());
    let mut header = vec!["step".to_string(), "loss".into(), "tau".into()];
    header.extend((0..blocks).map(|k| format!("entropy_{k}")));
    header.extend((0..blocks).map(|k| format!("argmax_{k}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), format!("{:e}", r.loss), format!("{:e}", r.tau)];
        rec.extend(r.entropy.iter().map(|e| format!("{e:e}")));
        rec.extend(r.argmax.iter().map(|a| a.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ToyDiTConfig;
    use crate::task::TaskConfig;

    fn setup() -> (ToyDiT, DiffusionTask) {
        let cfg = ToyDiTConfig { depth: 4, hidden_dim: 8, heads: 2, mlp_ratio: 2.0, seq_len: 2, ..Default::default() };
        let task = DiffusionTask::new(TaskConfig { train_size: 128, heldout_size: 32, ..Default::default() }).unwrap();
        (ToyDiT::init(cfg, &mut seeded(0, 0)).unwrap(), task)
    }

    #[test]
    fn frozen_requires_zero_weight_lr() {
        let (m, t) = setup();
        let cfg = PruneLearnConfig { strategy: UpdateStrategy::Frozen, ..Default::default() };
        assert!(matches!(learn_pruning(&m, &t, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_steps_keeps_uniform() {
        let (m, t) = setup();
        let cfg = PruneLearnConfig {
            strategy: UpdateStrategy::Frozen,
            weight_optim: OptimConfig::default().with_lr(0.0),
            steps: Some(0),
            ..Default::default()
        };
        let out = learn_pruning(&m, &t, &cfg, 0).unwrap();
        assert!(out.distribution.logits.data().iter().all(|v| *v == 0.0));
        assert_eq!(out.decision.per_block_choice, vec![0, 0]);
        assert_eq!(out.decision.retained_layers, vec![0, 2]);
    }

    #[test]
    fn decision_applied_once() {
        let (m, _) = setup();
        let d = PruneDecision::global(&[1.0, 0.0, 1.0, 1.0]);
        let p = apply_decision(&m, &d).unwrap();
        assert_eq!(p.depth(), 3);
        assert!(matches!(apply_decision(&p, &d), Err(Error::DepthMismatch { .. })));
    }
}
