//! Recovery training for pruned models: plain fine-tuning, output
//! distillation and masked hidden-state distillation.

use std::io::Write;
use std::path::Path;

use layerprune_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::mask::{NMScheme, PruneDecision};
use crate::model::{forward, Gates, ToyDiT};
use crate::optim::{halving_lr, linear_decay, OptimConfig};
use crate::rng::seeded;
use crate::task::DiffusionTask;
use crate::train::{collect_grads, DivergenceGuard, WeightUpdater};

const STREAM_RECOVER: u64 = 0x30;

/// Outlier test applied to each hidden-state tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    /// `|x − μ| > kσ`
    Centered,
    /// `|x| > kσ`
    Uncentered,
}

/// Which tensors decide that a position is excluded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Exclusion {
    /// Outlier in the teacher or the student.
    Union,
    TeacherOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub ema_decay: f64,
    /// Evenly spaced learning-rate halvings over the run.
    pub lr_halvings: u32,
    /// Weight of the teacher-output MSE.
    pub alpha_kd: f64,
    /// Weight of the ground-truth diffusion loss.
    pub alpha_diff: f64,
    /// Initial hidden-state loss weight, decayed linearly to 0.
    pub beta: f64,
    /// Outlier threshold multiplier.
    pub k: f64,
    pub threshold: Threshold,
    pub exclusion: Exclusion,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 128,
            optim: OptimConfig::default(),
            ema_decay: 0.999,
            lr_halvings: 4,
            alpha_kd: 0.9,
            alpha_diff: 0.1,
            beta: 1e-2,
            k: 2.0,
            threshold: Threshold::Centered,
            exclusion: Exclusion::Union,
        }
    }
}

impl DistillConfig {
    /// The same run with only the diffusion loss.
    pub fn plain(&self) -> Self {
        Self { alpha_kd: 0.0, alpha_diff: 1.0, beta: 0.0, ..self.clone() }
    }

    pub fn validate(&self, section: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err(format!("{section}.batch_size must be positive")));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(config_err(format!("{section}.ema_decay must lie in [0, 1)")));
        }
        for (key, v) in [("alpha_kd", self.alpha_kd), ("alpha_diff", self.alpha_diff), ("beta", self.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_err(format!("{section}.{key} must be finite and non-negative")));
            }
        }
        if self.alpha_kd + self.alpha_diff <= 0.0 {
            return Err(config_err(format!("{section}.alpha_kd + {section}.alpha_diff must be positive")));
        }
        if !(self.k > 0.0) {
            return Err(config_err(format!("{section}.k must be positive")));
        }
        self.optim.validate(&format!("{section}.optim"))
    }
}

/// Student layer to teacher layer pairs whose output states are matched.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAlignment {
    pub pairs: Vec<(usize, usize)>,
}

/// Aligns the last survivor of each block with the teacher state at the end
/// of that block.
pub fn block_alignment(teacher_depth: usize, scheme: NMScheme, decision: &PruneDecision) -> Result<BlockAlignment> {
    if decision.scheme.is_none() {
        return Err(Error::RepKdUnavailable);
    }
    if scheme.depth() != teacher_depth || decision.source_depth != teacher_depth {
        return Err(Error::DepthMismatch { expected: teacher_depth, actual: decision.source_depth });
    }
    let mut pairs = Vec::with_capacity(scheme.blocks);
    let mut student = 0;
    for k in 0..scheme.blocks {
        let range = k * scheme.m..(k + 1) * scheme.m;
        let survivors = decision.retained_layers.iter().filter(|l| range.contains(l)).count();
        if survivors != scheme.n {
            return Err(config_err(format!("block {k} keeps {survivors} layers, scheme {scheme} expects {}", scheme.n)));
        }
        student += survivors;
        pairs.push((student - 1, range.end - 1));
    }
    Ok(BlockAlignment { pairs })
}

/// Population mean and standard deviation.
pub fn moments(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mu = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt())
}

/// Positions of `xs` flagged as massive activations.
pub fn outliers(xs: &[f64], k: f64, threshold: Threshold) -> Vec<bool> {
    let (mu, sigma) = moments(xs);
    let center = match threshold {
        Threshold::Centered => mu,
        Threshold::Uncentered => 0.0,
    };
    xs.iter().map(|x| (x - center).abs() > k * sigma).collect()
}

/// Keep-mask (1 kept, 0 excluded) for a student/teacher pair.
pub fn keep_mask(student: &[f64], teacher: &[f64], k: f64, threshold: Threshold, exclusion: Exclusion) -> Vec<f64> {
    let t = outliers(teacher, k, threshold);
    let s = match exclusion {
        Exclusion::Union => outliers(student, k, threshold),
        Exclusion::TeacherOnly => vec![false; student.len()],
    };
    t.iter().zip(&s).map(|(a, b)| if *a || *b { 0.0 } else { 1.0 }).collect()
}

/// Masked representation loss with gradients to the student. Returns the
/// loss and the excluded fraction; the loss is 0 when everything is excluded.
pub fn masked_repkd_loss<'t>(
    student: Var<'t>,
    teacher: &Tensor,
    k: f64,
    threshold: Threshold,
    exclusion: Exclusion,
) -> Result<(Var<'t>, f64)> {
    let tape = student.tape();
    if student.shape() != teacher.shape() {
        return Err(Error::Tensor(layerprune_tensor::TensorError::Dimension {
            op: "masked_repkd_loss",
            detail: format!("student state {:?} vs teacher state {:?}", student.shape(), teacher.shape()),
        }));
    }
    let keep = keep_mask(student.value().data(), teacher.data(), k, threshold, exclusion);
    let kept = keep.iter().filter(|&&m| m == 1.0).count();
    let excluded = 1.0 - kept as f64 / keep.len().max(1) as f64;
    if kept == 0 {
        return Ok((tape.constant(Tensor::scalar(0.0)), excluded));
    }
    let diff = student.sub(tape.constant(teacher.clone()))?;
    let mask = tape.constant(Tensor::new(teacher.shape().to_vec(), keep)?);
    Ok((diff.square().mul(mask)?.sum().scale(1.0 / kept as f64), excluded))
}

/// One row of the recovery log.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillLogRow {
    pub step: usize,
    pub total: f64,
    pub kd: f64,
    pub diff: f64,
    pub rep: f64,
    pub beta: f64,
    pub lr: f64,
    pub excluded: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recovered {
    pub model: ToyDiT,
    pub ema: ToyDiT,
    pub step: usize,
    pub log: Vec<DistillLogRow>,
}

/// Teacher output and block outputs, without gradients.
fn teacher_pass(teacher: &ToyDiT, input: &crate::model::ModelInput) -> Result<(Tensor, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = teacher.bind(&tape, false);
    let pass = forward(&teacher.config, &p, None, input, Gates::All)?;
    Ok((pass.output.to_tensor(), pass.hidden.iter().map(|h| h.to_tensor()).collect()))
}

fn recover(
    mut student: ToyDiT,
    teacher: Option<(&ToyDiT, Option<&BlockAlignment>)>,
    task: &DiffusionTask,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Recovered> {
    cfg.validate("recover")?;
    if let Some((_, Some(align))) = teacher {
        if let Some(&(s, _)) = align.pairs.iter().find(|(s, _)| *s >= student.depth()) {
            return Err(config_err(format!("alignment refers to student layer {s} of {}", student.depth())));
        }
    }
    let mut data = seeded(seed, STREAM_RECOVER);
    let mut upd = WeightUpdater::new(&student, cfg.optim, cfg.ema_decay);
    let mut guard = DivergenceGuard::default();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let lr = halving_lr(cfg.optim.lr, step, cfg.steps, cfg.lr_halvings);
        let beta = linear_decay(cfg.beta, step, cfg.steps);
        let batch = task.train_batch(cfg.batch_size, &mut data);
        let input = student.batch_input(&batch, &task.schedule);
        let tape = Tape::new();
        let params = student.bind(&tape, true);
        let pass = forward(&student.config, &params, None, &input, Gates::All)?;

        let diff = pass.output.mse(tape.constant(student.noise_target(&batch)))?;
        let mut total = diff.scale(cfg.alpha_diff);
        let (mut kd_value, mut rep_value, mut excluded) = (0.0, 0.0, Vec::new());
        if let Some((teacher, align)) = teacher.filter(|_| cfg.alpha_kd > 0.0 || cfg.beta > 0.0) {
            let (t_out, t_hidden) = teacher_pass(teacher, &input)?;
            if cfg.alpha_kd > 0.0 {
                let kd = pass.output.mse(tape.constant(t_out))?;
                kd_value = kd.item();
                total = total.add(kd.scale(cfg.alpha_kd))?;
            }
            if let (Some(align), true) = (align, beta > 0.0) {
                let mut rep = tape.constant(Tensor::scalar(0.0));
                for &(s, t) in &align.pairs {
                    let (l, frac) = masked_repkd_loss(pass.hidden[s], &t_hidden[t], cfg.k, cfg.threshold, cfg.exclusion)?;
                    rep = rep.add(l)?;
                    excluded.push(frac);
                }
                rep_value = rep.item();
                total = total.add(rep.scale(beta))?;
            }
        }
        let value = total.item();
        if !value.is_finite() {
            return Err(Error::NonFiniteDistill { step, kd: kd_value, diff: diff.item(), rep: rep_value });
        }
        let diff_value = diff.item();
        let grads = tape.backward(total)?;
        let g = collect_grads(&grads, &params);
        drop(params);
        upd.apply(&mut student, &g, lr);
        guard.observe(step, value)?;
        log.push(DistillLogRow { step, total: value, kd: kd_value, diff: diff_value, rep: rep_value, beta, lr, excluded });
    }
    Ok(Recovered { model: student, ema: upd.shadow, step: cfg.steps, log })
}

/// Fine-tunes `student` against a frozen `teacher`. Without an alignment the
/// hidden-state term is skipped.
pub fn distill_finetune(
    student: ToyDiT,
    teacher: &ToyDiT,
    alignment: Option<&BlockAlignment>,
    task: &DiffusionTask,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<Recovered> {
    recover(student, Some((teacher, alignment)), task, cfg, seed)
}

/// Plain diffusion-loss fine-tuning with the schedule and EMA of `cfg`.
pub fn finetune(student: ToyDiT, task: &DiffusionTask, cfg: &DistillConfig, seed: u64) -> Result<Recovered> {
    recover(student, None, task, &cfg.plain(), seed)
}

/// Writes the recovery log as CSV after a provenance comment.
pub fn write_distill_log(path: impl AsRef<Path>, provenance: &str, rows: &[DistillLogRow]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# {provenance}")?;
    let mut w = csv::Writer::from_writer(file);
    let pairs = rows.iter().map(|r| r.excluded.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["step", "total", "kd", "diff", "rep", "beta", "lr"].map(String::from).to_vec();
    header.extend((0..pairs).map(|i| format!("excluded_{i}")));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string()];
        rec.extend([r.total, r.kd, r.diff, r.rep, r.beta, r.lr].map(|v| format!("{v:e}")));
        rec.extend((0..pairs).map(|i| r.excluded.get(i).map_or(String::new(), |v| format!("{v:e}"))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
