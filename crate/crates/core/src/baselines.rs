//! Search- and metric-based depth pruning baselines.

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::mask::{enumerate_candidates, NMScheme, PruneDecision};
use crate::model::ToyDiT;
use crate::rng::seeded;
use crate::task::{Batch, DiffusionTask, NoiseSchedule};

const STREAM_CALIB: u64 = 0x20;
const STREAM_SEARCH: u64 = 0x21;

/// Fixed calibration batch shared by every method in an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub batch: Batch,
    pub schedule: NoiseSchedule,
}

impl CalibrationSet {
    /// `size` training examples with timesteps and noise fixed by `seed`.
    pub fn new(task: &DiffusionTask, size: usize, seed: u64) -> Self {
        let batch = task.train_batch(size, &mut seeded(seed, STREAM_CALIB));
        Self { batch, schedule: task.schedule.clone() }
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }
}

/// Mean diffusion loss of the gated model on the calibration set. Non-finite
/// values are returned, not raised.
pub fn calibration_loss(model: &ToyDiT, gates: &[f64], calib: &CalibrationSet) -> Result<f64> {
    model.loss_value(&calib.batch, &calib.schedule, gates)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskScore {
    pub gates: Vec<f64>,
    pub calibration_loss: f64,
    pub method: String,
}

impl MaskScore {
    pub fn is_finite(&self) -> bool {
        self.calibration_loss.is_finite()
    }

    pub fn bitstring(&self) -> String {
        PruneDecision::global(&self.gates).bitstring()
    }
}

/// Masks drawn by random search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandomSpace {
    /// One uniform candidate per block.
    Scheme(NMScheme),
    /// Uniform subset of `keep` layers.
    Keep(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomSearch {
    /// In sample order.
    pub scores: Vec<MaskScore>,
    pub min: usize,
    pub median: usize,
    pub max: usize,
}

impl RandomSearch {
    /// Indices ordered by loss; non-finite losses sort last, ties by index.
    pub fn ranking(&self) -> Vec<usize> {
        rank(&self.scores)
    }
}

fn loss_key(v: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        f64::INFINITY
    }
}

fn rank(scores: &[MaskScore]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        loss_key(scores[a].calibration_loss).total_cmp(&loss_key(scores[b].calibration_loss)).then(a.cmp(&b))
    });
    idx
}

fn random_mask<R: Rng>(depth: usize, space: RandomSpace, cands: Option<&layerprune_tensor::Tensor>, rng: &mut R) -> Vec<f64> {
    match space {
        RandomSpace::Keep(keep) => {
            let mut g = vec![0.0; depth];
            for i in sample_indices(rng, depth, keep).into_iter() {
                g[i] = 1.0;
            }
            g
        }
        RandomSpace::Scheme(s) => {
            let c = cands.expect("candidates for scheme search");
            (0..s.blocks).flat_map(|_| c.row(rng.random_range(0..c.shape()[0])).to_vec()).collect()
        }
    }
}

/// Scores `n` uniformly drawn masks. Evaluation is parallel; results stay
/// in sample order.
pub fn random_search(model: &ToyDiT, calib: &CalibrationSet, n: usize, space: RandomSpace, seed: u64) -> Result<RandomSearch> {
    if n == 0 {
        return Err(config_err("random search needs at least one sample"));
    }
    let depth = model.depth();
    let cands = match space {
        RandomSpace::Keep(k) if k > depth => return Err(config_err(format!("cannot keep {k} of {depth} layers"))),
        RandomSpace::Scheme(s) if s.depth() != depth => {
            return Err(config_err(format!("scheme covers {} layers, model has {depth}", s.depth())))
        }
        RandomSpace::Scheme(s) => Some(enumerate_candidates(s.n, s.m)?),
        RandomSpace::Keep(_) => None,
    };
    let mut rng = seeded(seed, STREAM_SEARCH);
    let masks: Vec<Vec<f64>> = (0..n).map(|_| random_mask(depth, space, cands.as_ref(), &mut rng)).collect();
    let scores = masks
        .into_par_iter()
        .map(|gates| {
            let loss = calibration_loss(model, &gates, calib)?;
            Ok(MaskScore { gates, calibration_loss: loss, method: "random".into() })
        })
        .collect::<Result<Vec<_>>>()?;
    let order = rank(&scores);
    Ok(RandomSearch { min: order[0], median: order[(n - 1) / 2], max: order[n - 1], scores })
}

/// Gates keeping every layer except the `depth − keep` lowest-scoring ones
/// (ties: lower index removed first).
fn drop_lowest(scores: &[f64], keep: usize) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut g = vec![1.0; scores.len()];
    for &i in &idx[..scores.len() - keep] {
        g[i] = 0.0;
    }
    g
}

fn check_keep(model: &ToyDiT, keep: usize) -> Result<()> {
    if keep >= model.depth() {
        return Err(config_err(format!("keep ({keep}) must be below the model depth ({})", model.depth())));
    }
    Ok(())
}

/// A metric baseline's mask together with the per-layer scores behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredMask {
    pub gates: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Removes the layers whose individual removal raises the loss least.
pub fn sensitivity_prune(model: &ToyDiT, calib: &CalibrationSet, keep: usize) -> Result<ScoredMask> {
    check_keep(model, keep)?;
    let base = calibration_loss(model, &model.all_on(), calib)?;
    let scores = (0..model.depth())
        .map(|i| {
            let mut g = model.all_on();
            g[i] = 0.0;
            Ok(calibration_loss(model, &g, calib)? - base)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoredMask { gates: drop_lowest(&scores, keep), scores })
}

/// Timesteps feeding the hidden-state baselines: 25%, 50% and 75% of the range.
pub fn probe_timesteps(num_timesteps: usize) -> [usize; 3] {
    [num_timesteps / 4, num_timesteps / 2, 3 * num_timesteps / 4]
}

/// Per-layer mean of `f(x_i, φ_i(x_i))` over tokens and probe timesteps.
fn hidden_metric(model: &ToyDiT, calib: &CalibrationSet, f: impl Fn(&[f64], &[f64]) -> f64) -> Result<Vec<f64>> {
    let ts = probe_timesteps(calib.schedule.len());
    let mut acc = vec![0.0; model.depth()];
    for &t in &ts {
        let batch = calib.batch.at_timestep(t);
        let states = model.hidden_states(&model.batch_input(&batch, &calib.schedule), &model.all_on())?;
        let rows = states[0].shape()[0];
        for (i, a) in acc.iter_mut().enumerate() {
            let (x, y) = (&states[i], &states[i + 1]);
            let total: f64 = (0..rows).map(|r| f(x.row(r), y.row(r))).sum();
            *a += total / rows as f64;
        }
    }
    Ok(acc.into_iter().map(|a| a / ts.len() as f64).collect())
}

/// Cosine similarity; a zero-norm side counts as fully similar.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Removes the layers whose output is most similar to their input.
pub fn similarity_prune(model: &ToyDiT, calib: &CalibrationSet, keep: usize) -> Result<ScoredMask> {
    check_keep(model, keep)?;
    let scores = hidden_metric(model, calib, cosine)?;
    let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
    Ok(ScoredMask { gates: drop_lowest(&neg, keep), scores })
}

/// Removes the layers whose output moves least from their input.
pub fn mse_prune(model: &ToyDiT, calib: &CalibrationSet, keep: usize) -> Result<ScoredMask> {
    check_keep(model, keep)?;
    let scores = hidden_metric(model, calib, |x, y| x.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum())?;
    Ok(ScoredMask { gates: drop_lowest(&scores, keep), scores })
}

/// Keeps the first and last layers plus evenly spaced ones in between:
/// `round(j·(L−1)/(keep−1))` for `j = 0..keep`.
pub fn oracle_prune(depth: usize, keep: usize) -> Result<Vec<f64>> {
    if keep < 2 {
        return Err(config_err("the uniform oracle keeps at least 2 layers"));
    }
    if keep > depth {
        return Err(config_err(format!("cannot keep {keep} of {depth} layers")));
    }
    let mut g = vec![0.0; depth];
    for j in 0..keep {
        let idx = (j as f64 * (depth - 1) as f64 / (keep - 1) as f64).round() as usize;
        g[idx] = 1.0;
    }
    Ok(g)
}

/// Writes scores as CSV (`mask,loss,method`) after a provenance comment.
pub fn write_scores_csv(path: impl AsRef<Path>, provenance: &str, scores: &[MaskScore]) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    writeln!(file, "# {provenance}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(["mask", "loss", "method"])?;
    for s in scores {
        w.write_record([s.bitstring(), format!("{:e}", s.calibration_loss), s.method.clone()])?;
    }
    w.flush()?;
    Ok(())
}
