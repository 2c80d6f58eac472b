//! Held-out loss, sample quality, activation statistics and throughput.

use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::{ModelInput, ToyDiT, ToyDiTConfig};
use crate::rng::seeded;
use crate::task::{DiffusionTask, Point, TaskConfig};
use crate::train::sample;

const STREAM_PROJ: u64 = 0x40;
const STREAM_TRUE: u64 = 0x41;
const STREAM_BENCH: u64 = 0x42;

/// Random directions used by [`sliced_wasserstein`].
pub const PROJECTIONS: usize = 64;
/// Seed of the projection directions, fixed so distances are comparable.
pub const PROJECTION_SEED: u64 = 0x5eed;

/// Serializes non-finite floats as the strings `"inf"`, `"-inf"`, `"nan"`.
pub mod nonfinite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match v {
            v if v.is_finite() => s.serialize_f64(*v),
            v if v.is_nan() => s.serialize_str("nan"),
            v if *v > 0.0 => s.serialize_str("inf"),
            _ => s.serialize_str("-inf"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "nan" => Ok(f64::NAN),
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(serde::de::Error::custom(format!("expected a number, got {other:?}"))),
            },
        }
    }
}

/// Mean ε-MSE on the held-out split with noise and timesteps fixed by `seed`.
pub fn eval_loss(model: &ToyDiT, task: &DiffusionTask, seed: u64) -> Result<f64> {
    let batch = task.heldout_batch(seed);
    let gates = model.all_on();
    let mut total = 0.0;
    for chunk in batch.chunks(1024) {
        total += model.loss_value(&chunk, &task.schedule, &gates)? * chunk.len() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Sliced 1-Wasserstein distance between two equally sized point sets.
pub fn sliced_wasserstein(a: &[Point], b: &[Point], projections: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(config_err(format!("point sets must be non-empty and equal in size ({} vs {})", a.len(), b.len())));
    }
    let mut rng = seeded(seed, STREAM_PROJ);
    let mut total = 0.0;
    for _ in 0..projections {
        let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = [angle.cos(), angle.sin()];
        let project = |ps: &[Point]| {
            let mut v: Vec<f64> = ps.iter().map(|p| p[0] * dir[0] + p[1] * dir[1]).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let (pa, pb) = (project(a), project(b));
        total += pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
    }
    Ok(total / projections as f64)
}

/// Distance between `n` DDIM samples and `n` fresh mixture draws.
pub fn sample_quality(model: &ToyDiT, task: &DiffusionTask, n: usize, sample_steps: usize, seed: u64) -> Result<f64> {
    if n < 100 {
        return Err(config_err("sample quality needs at least 100 points"));
    }
    let generated = sample(model, task, n, sample_steps, seed, &model.all_on())?;
    let truth = task.mixture.sample_n(n, &mut seeded(seed, STREAM_TRUE));
    sliced_wasserstein(&generated, &truth, PROJECTIONS, PROJECTION_SEED)
}

/// Statistics of one hidden-state tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    /// `max |x − μ| / σ`; infinite when σ is 0.
    #[serde(with = "nonfinite")]
    pub max_ratio: f64,
    #[serde(with = "nonfinite")]
    pub mean: f64,
    #[serde(with = "nonfinite")]
    pub std: f64,
    /// σ was 0.
    pub degenerate: bool,
}

impl ActivationStats {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let dev = xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
        let degenerate = std == 0.0;
        let max_ratio = if degenerate { f64::INFINITY } else { dev / std };
        Self { max_ratio, mean, std, degenerate }
    }
}

/// Per-layer statistics of each block's output.
pub fn activation_stats(model: &ToyDiT, input: &ModelInput) -> Result<Vec<ActivationStats>> {
    let states = model.hidden_states(input, &model.all_on())?;
    Ok(states[1..].iter().map(|h| ActivationStats::of(h.data())).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub depths: Vec<usize>,
    pub model: ToyDiTConfig,
    pub batch: usize,
    pub trials: usize,
    pub warmup: usize,
    /// Trials shorter than this double the batch and start over.
    pub min_trial_secs: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            depths: vec![8, 6, 4],
            model: ToyDiTConfig::default(),
            batch: 64,
            trials: 7,
            warmup: 2,
            min_trial_secs: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub depth: usize,
    /// Forward passes per second, median over trials.
    pub its: f64,
    /// `its / its` of the first depth.
    pub speedup: f64,
    pub batch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Set when the batch had to grow to get measurable trials.
    pub note: Option<String>,
}

static BENCH_LOCK: Mutex<()> = Mutex::new(());

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Round-robin timing: each trial runs every model once, so slow drift in
/// machine load affects all depths alike.
fn time_trials(models: &[(ToyDiT, ModelInput)], cfg: &BenchConfig) -> Result<Vec<Vec<f64>>> {
    for _ in 0..cfg.warmup {
        for (m, input) in models {
            m.predict(input, &m.all_on())?;
        }
    }
    let mut times = vec![Vec::with_capacity(cfg.trials); models.len()];
    for _ in 0..cfg.trials {
        for ((m, input), out) in models.iter().zip(&mut times) {
            let gates = m.all_on();
            let start = Instant::now();
            std::hint::black_box(m.predict(input, &gates)?);
            out.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(times)
}

/// Median forward throughput per depth. Benchmarks in one process never
/// overlap.
pub fn throughput_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.trials < 5 {
        return Err(config_err("bench.trials must be at least 5"));
    }
    if cfg.depths.is_empty() || cfg.batch == 0 {
        return Err(config_err("bench needs at least one depth and a positive batch"));
    }
    let _guard = BENCH_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let models = cfg
        .depths
        .iter()
        .map(|&depth| ToyDiT::init(ToyDiTConfig { depth, ..cfg.model.clone() }, &mut seeded(0, STREAM_BENCH)))
        .collect::<Result<Vec<_>>>()?;
    let mut batch = cfg.batch;
    let mut note = None;
    loop {
        let mut rng = seeded(1, STREAM_BENCH);
        let points: Vec<Point> = (0..batch).map(|_| [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]).collect();
        let t: Vec<usize> = (0..batch).map(|_| rng.random_range(0..cfg.model.num_timesteps)).collect();
        let labels: Option<Vec<usize>> =
            (cfg.model.num_classes > 0).then(|| (0..batch).map(|_| rng.random_range(0..cfg.model.num_classes)).collect());
        let runs: Vec<(ToyDiT, ModelInput)> =
            models.iter().map(|m| (m.clone(), m.input_for(&points, &t, labels.as_deref()))).collect();
        let medians: Vec<f64> = time_trials(&runs, cfg)?.into_iter().map(median).collect();
        let too_fast = medians.iter().any(|&s| s < cfg.min_trial_secs);
        if too_fast && batch < (1 << 20) {
            batch *= 2;
            note = Some(format!("batch raised from {} to {batch} for timer resolution", cfg.batch));
            continue;
        }
        let reference = 1.0 / medians[0];
        let rows = cfg
            .depths
            .iter()
            .zip(&medians)
            .map(|(&depth, &secs)| BenchRow { depth, its: 1.0 / secs, speedup: (1.0 / secs) / reference, batch })
            .collect();
        return Ok(BenchReport { rows, note });
    }
}

/// Evaluation summary for one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub depth: usize,
    pub parameter_count: usize,
    #[serde(with = "nonfinite")]
    pub heldout_loss: f64,
    #[serde(with = "nonfinite")]
    pub sliced_wasserstein: f64,
    /// Timing field; excluded from reproducibility comparisons.
    pub throughput: Option<f64>,
    pub activations: Vec<ActivationStats>,
    pub task: TaskConfig,
    pub config_hash: String,
    pub seed: u64,
    /// Names of metrics that are not finite.
    pub non_finite: Vec<String>,
}

impl EvalReport {
    pub fn flag_non_finite(&mut self) {
        self.non_finite.clear();
        for (name, v) in [("heldout_loss", self.heldout_loss), ("sliced_wasserstein", self.sliced_wasserstein)] {
            if !v.is_finite() {
                self.non_finite.push(name.into());
            }
        }
        for (i, a) in self.activations.iter().enumerate() {
            if !a.mean.is_finite() || !a.std.is_finite() || (!a.degenerate && !a.max_ratio.is_finite()) {
                self.non_finite.push(format!("activations.{i}"));
            }
        }
    }

    /// Copy with timing fields cleared.
    pub fn without_timing(&self) -> Self {
        Self { throughput: None, ..self.clone() }
    }
}

/// Refuses to line up reports computed on different tasks.
pub fn check_comparable(reports: &[EvalReport]) -> Result<()> {
    if let Some(first) = reports.first() {
        if let Some(bad) = reports.iter().find(|r| r.task != first.task) {
            return Err(config_err(format!(
                "report {} uses a different task definition than {}",
                bad.model_id, first.model_id
            )));
        }
    }
    Ok(())
}

/// Equal-width histogram of the finite values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub non_finite: usize,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(config_err("histogram needs at least one bin"));
        }
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let non_finite = values.len() - finite.len();
        if finite.is_empty() {
            return Ok(Self { edges: vec![], counts: vec![], non_finite });
        }
        let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
        let edges = (0..=bins).map(|i| if i == bins && hi > lo { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0; bins];
        for v in finite {
            let i = (((v - lo) / width) as usize).min(bins - 1);
            counts[i] += 1;
        }
        Ok(Self { edges, counts, non_finite })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_layer_is_degenerate() {
        let s = ActivationStats::of(&[3.0; 10]);
        assert!(s.degenerate);
        assert_eq!(s.max_ratio, f64::INFINITY);
        let json = serde_json::to_string(&s).unwrap();
        let back: ActivationStats = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn sw_of_identical_sets_is_zero() {
        let a = vec![[0.0, 1.0], [2.0, -1.0], [0.5, 0.5]];
        let mut b = a.clone();
        b.reverse();
        assert_eq!(sliced_wasserstein(&a, &b, 16, 3).unwrap(), 0.0);
        assert!(sliced_wasserstein(&a, &b[..2], 16, 3).is_err());
    }

    #[test]
    fn histogram_counts_everything() {
        let h = Histogram::new(&[0.0, 1.0, 2.0, 10.0, f64::NAN], 5).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert_eq!(h.non_finite, 1);
        assert_eq!(h.edges.len(), 6);
        assert_eq!(*h.edges.last().unwrap(), 10.0);
    }

    #[test]
    fn bench_rejects_few_trials() {
        assert!(throughput_bench(&BenchConfig { trials: 4, ..Default::default() }).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
