//! Synthetic 2-D diffusion task: a Gaussian mixture on a circle plus a linear
//! DDPM noise schedule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::seeded;

pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub modes: usize,
    pub radius: f64,
    pub mode_std: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub num_timesteps: usize,
    pub train_size: usize,
    pub heldout_size: usize,
    pub data_seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            modes: 8,
            radius: 1.0,
            mode_std: 0.05,
            beta_start: 1e-4,
            beta_end: 2e-2,
            num_timesteps: 100,
            train_size: 65_536,
            heldout_size: 2_048,
            data_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub means: Vec<Point>,
    pub std: f64,
}

impl GaussianMixture {
    /// `modes` equal-weight isotropic Gaussians evenly spaced on a circle.
    pub fn circle(modes: usize, radius: f64, std: f64) -> Self {
        let means = (0..modes)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / modes as f64;
                [radius * angle.cos(), radius * angle.sin()]
            })
            .collect();
        Self { means, std }
    }

    /// Draws one point and the index of the mode it came from.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Point, usize) {
        let k = rng.random_range(0..self.means.len());
        let zx: f64 = StandardNormal.sample(rng);
        let zy: f64 = StandardNormal.sample(rng);
        let [mx, my] = self.means[k];
        ([mx + self.std * zx, my + self.std * zy], k)
    }

    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point> {
        (0..n).map(|_| self.sample(rng).0).collect()
    }

    /// Distance from `p` to the closest mode centre.
    pub fn nearest_mode_distance(&self, p: Point) -> f64 {
        self.means
            .iter()
            .map(|m| ((p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn nearest_mode(&self, p: Point) -> usize {
        let d = |m: &Point| (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
        (0..self.means.len()).min_by(|&a, &b| d(&self.means[a]).total_cmp(&d(&self.means[b]))).unwrap()
    }
}

/// Linear-β DDPM schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(beta_start: f64, beta_end: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(config_err("num_timesteps must be positive"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config_err(format!("invalid beta range {beta_start}..{beta_end}")));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect()
        };
        let mut prod = 1.0;
        let alphas_cumprod = betas
            .iter()
            .map(|b| {
                prod *= 1.0 - b;
                prod
            })
            .collect();
        Ok(Self { betas, alphas_cumprod })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    /// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε`
    pub fn noisy(&self, x0: Point, t: usize, eps: Point) -> Point {
        let a = self.alphas_cumprod[t];
        let (s, n) = (a.sqrt(), (1.0 - a).sqrt());
        [s * x0[0] + n * eps[0], s * x0[1] + n * eps[1]]
    }
}

/// A batch of clean points with their diffusion timesteps and noise.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x0: Vec<Point>,
    pub t: Vec<usize>,
    pub noise: Vec<Point>,
    pub labels: Option<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    /// Examples `range` as a new batch.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Batch {
        Batch {
            x0: self.x0[range.clone()].to_vec(),
            t: self.t[range.clone()].to_vec(),
            noise: self.noise[range.clone()].to_vec(),
            labels: self.labels.as_ref().map(|l| l[range].to_vec()),
        }
    }

    /// Same points and noise, every example at timestep `t`.
    pub fn at_timestep(&self, t: usize) -> Batch {
        Batch { t: vec![t; self.len()], ..self.clone() }
    }

    pub fn noisy_points(&self, schedule: &NoiseSchedule) -> Vec<Point> {
        self.x0.iter().zip(&self.t).zip(&self.noise).map(|((x, &t), e)| schedule.noisy(*x, t, *e)).collect()
    }

    pub fn chunks(&self, size: usize) -> impl Iterator<Item = Batch> + '_ {
        (0..self.len()).step_by(size.max(1)).map(move |s| self.slice(s..(s + size).min(self.len())))
    }
}

/// Mixture, schedule, and fixed train / held-out splits.
#[derive(Clone, Debug)]
pub struct DiffusionTask {
    pub config: TaskConfig,
    pub mixture: GaussianMixture,
    pub schedule: NoiseSchedule,
    pub train: Vec<(Point, usize)>,
    pub heldout: Vec<(Point, usize)>,
}

impl DiffusionTask {
    pub fn new(config: TaskConfig) -> Result<Self> {
        if config.modes == 0 || config.train_size == 0 || config.heldout_size == 0 {
            return Err(config_err("modes, train_size and heldout_size must be positive"));
        }
        if !(config.mode_std > 0.0) {
            return Err(config_err("mode_std must be positive"));
        }
        let mixture = GaussianMixture::circle(config.modes, config.radius, config.mode_std);
        let schedule = NoiseSchedule::linear(config.beta_start, config.beta_end, config.num_timesteps)?;
        // separate streams keep the two splits disjoint draws
        let mut train_rng = seeded(config.data_seed, 0x7261_696e);
        let mut held_rng = seeded(config.data_seed, 0x6865_6c64);
        let train = (0..config.train_size).map(|_| mixture.sample(&mut train_rng)).collect();
        let heldout = (0..config.heldout_size).map(|_| mixture.sample(&mut held_rng)).collect();
        Ok(Self { config, mixture, schedule, train, heldout })
    }

    pub fn num_timesteps(&self) -> usize {
        self.schedule.len()
    }

    fn build(&self, points: &[(Point, usize)], t: Vec<usize>, rng: &mut ChaCha8Rng) -> Batch {
        let noise = (0..points.len())
            .map(|_| {
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                [a, b]
            })
            .collect();
        Batch {
            x0: points.iter().map(|p| p.0).collect(),
            t,
            noise,
            labels: Some(points.iter().map(|p| p.1).collect()),
        }
    }

    /// Random training batch: indices with replacement, uniform timesteps.
    pub fn train_batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Batch {
        let points: Vec<_> = (0..size).map(|_| self.train[rng.random_range(0..self.train.len())]).collect();
        let t = (0..size).map(|_| rng.random_range(0..self.num_timesteps())).collect();
        self.build(&points, t, rng)
    }

    /// Fresh mixture draws with pre-sampled timesteps and noise.
    pub fn fresh_batch(&self, size: usize, rng: &mut ChaCha8Rng) -> Batch {
        let points: Vec<_> = (0..size).map(|_| self.mixture.sample(rng)).collect();
        let t = (0..size).map(|_| rng.random_range(0..self.num_timesteps())).collect();
        self.build(&points, t, rng)
    }

    /// The held-out split with timesteps and noise fixed by `seed`.
    pub fn heldout_batch(&self, seed: u64) -> Batch {
        let mut rng = seeded(seed, 0x6576_616c);
        let t = (0..self.heldout.len()).map(|_| rng.random_range(0..self.num_timesteps())).collect();
        self.build(&self.heldout, t, &mut rng)
    }
}
