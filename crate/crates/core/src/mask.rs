//! N:M layer-mask candidates and differentiable Gumbel-softmax sampling.
//!
//! Layers are split into `K = L / M` contiguous blocks. Each block keeps
//! exactly `N` layers, chosen from the `C(M, N)` candidate masks by a
//! per-block categorical distribution. Sampling is hard in the forward pass
//! and relaxed in the backward pass.

use std::fmt;
use std::str::FromStr;

use layerprune_tensor::{straight_through, Tensor, Var};
use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Largest block width accepted by [`enumerate_candidates`].
pub const MAX_BLOCK: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NMScheme {
    /// Layers kept per block.
    pub n: usize,
    /// Layers per block.
    pub m: usize,
    /// Number of blocks.
    pub blocks: usize,
}

impl NMScheme {
    pub fn new(n: usize, m: usize, depth: usize) -> Result<Self> {
        if !(0 < n && n < m) {
            return Err(config_err(format!("scheme {n}:{m} needs 0 < N < M")));
        }
        if m > MAX_BLOCK {
            return Err(config_err(format!("block width {m} exceeds the limit of {MAX_BLOCK}")));
        }
        if depth % m != 0 {
            return Err(config_err(format!("depth {depth} is not a multiple of the block width {m}")));
        }
        Ok(Self { n, m, blocks: depth / m })
    }

    pub fn depth(&self) -> usize {
        self.m * self.blocks
    }

    pub fn kept(&self) -> usize {
        self.n * self.blocks
    }

    pub fn num_candidates(&self) -> usize {
        binomial(self.m as u64, self.n as u64).expect("block width is bounded") as usize
    }
}

impl fmt::Display for NMScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

/// An `"N:M"` pair before it is bound to a model depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchemeSpec {
    pub n: usize,
    pub m: usize,
}

impl SchemeSpec {
    pub fn for_depth(&self, depth: usize) -> Result<NMScheme> {
        NMScheme::new(self.n, self.m, depth)
    }
}

impl FromStr for SchemeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || config_err(format!("scheme must look like N:M, got {s:?}"));
        let (n, m) = s.split_once(':').ok_or_else(bad)?;
        Ok(Self { n: n.trim().parse().map_err(|_| bad())?, m: m.trim().parse().map_err(|_| bad())? })
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

/// `C(n, k)`, or `None` on u64 overflow.
pub fn binomial(n: u64, k: u64) -> Option<u64> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u64 = 1;
    for i in 0..k {
        // acc·(n−i) is divisible by (i+1) at every step
        let num = (acc as u128) * ((n - i) as u128);
        acc = u64::try_from(num / (i as u128 + 1)).ok()?;
    }
    Some(acc)
}

/// All binary masks of width `m` with exactly `n` ones, in descending
/// lexicographic order, as a `[C(m,n), m]` matrix.
pub fn enumerate_candidates(n: usize, m: usize) -> Result<Tensor> {
    if !(0 < n && n < m) {
        return Err(config_err(format!("candidates need 0 < N < M, got {n}:{m}")));
    }
    if m > MAX_BLOCK {
        return Err(config_err(format!("block width {m} exceeds the limit of {MAX_BLOCK}")));
    }
    fn rec(pos: usize, left: usize, m: usize, cur: &mut Vec<f64>, out: &mut Vec<f64>) {
        if pos == m {
            if left == 0 {
                out.extend_from_slice(cur);
            }
            return;
        }
        if left > m - pos {
            return;
        }
        for bit in [1usize, 0] {
            if bit == 1 && left == 0 {
                continue;
            }
            cur.push(bit as f64);
            rec(pos + 1, left - bit, m, cur, out);
            cur.pop();
        }
    }
    let mut data = Vec::new();
    rec(0, n, m, &mut Vec::with_capacity(m), &mut data);
    let rows = data.len() / m;
    Ok(Tensor::new([rows, m], data)?)
}

/// What is being searched over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchSpace {
    Scheme(NMScheme),
    Global { layers: usize, keep: usize },
}

/// Number of distinct masks: `C(M,N)^K` for a scheme, `C(L, keep)` globally.
pub fn search_space_size(space: SearchSpace) -> Result<u64> {
    let overflow = || config_err("search space size overflows 64 bits");
    match space {
        SearchSpace::Scheme(s) => {
            let c = binomial(s.m as u64, s.n as u64).ok_or_else(overflow)?;
            c.checked_pow(s.blocks as u32).ok_or_else(overflow)
        }
        SearchSpace::Global { layers, keep } => {
            if keep > layers {
                return Err(config_err(format!("cannot keep {keep} of {layers} layers")));
            }
            binomial(layers as u64, keep as u64).ok_or_else(overflow)
        }
    }
}

/// `C(M,N)·K`: candidate count summed over blocks rather than combined.
pub fn block_pattern_count(s: NMScheme) -> Result<u64> {
    let c = binomial(s.m as u64, s.n as u64).ok_or_else(|| config_err("overflow"))?;
    c.checked_mul(s.blocks as u64).ok_or_else(|| config_err("search space size overflows 64 bits"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Linear,
    Exponential,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemperatureSchedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
    pub decay: Decay,
}

impl TemperatureSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.start.is_finite()) {
            return Err(config_err("prune.learn.tau_start and tau_end must be positive"));
        }
        if self.end > self.start {
            return Err(config_err("prune.learn.tau_end must not exceed tau_start"));
        }
        Ok(())
    }

    /// `τ(step)`, clamped to `end` past `total_steps`.
    pub fn at(&self, step: usize) -> f64 {
        if self.total_steps == 0 || step >= self.total_steps {
            return self.end;
        }
        let s = step as f64 / self.total_steps as f64;
        match self.decay {
            Decay::Linear => self.start + (self.end - self.start) * s,
            Decay::Exponential => self.start * (self.end / self.start).powf(s),
        }
    }
}

/// Per-block categorical over candidate masks.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDistribution {
    pub scheme: NMScheme,
    /// `[C, M]`
    pub candidates: Tensor,
    /// `[K, C]`
    pub logits: Tensor,
}

/// Standard Gumbel noise `−ln(−ln u)`, `u ~ U(0,1)`, row-major over `[rows, cols]`.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn([rows, cols], |_| {
        let u: f64 = rng.sample(Open01);
        -(-u.ln()).ln()
    })
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    log_softmax_row(row).into_iter().map(f64::exp).collect()
}

/// One hard draw for a single block: `(one-hot y, block mask)`.
pub fn sample_block<R: Rng + ?Sized>(logits: &[f64], candidates: &Tensor, tau: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(config_err(format!("temperature must be positive, got {tau}")));
    }
    if logits.len() != candidates.shape()[0] {
        return Err(config_err("logit count does not match the candidate count"));
    }
    let noise = gumbel_noise(1, logits.len(), rng);
    let lp = log_softmax_row(logits);
    let z: Vec<f64> = lp.iter().zip(noise.data()).map(|(a, b)| a + b).collect();
    let c = argmax(&z);
    let mut y = vec![0.0; logits.len()];
    y[c] = 1.0;
    Ok((y, candidates.row(c).to_vec()))
}

/// Output of a differentiable draw.
pub struct Draw<'t> {
    /// `[L]` gate vector; forward value is exactly binary.
    pub gates: Var<'t>,
    /// Chosen candidate per block.
    pub choice: Vec<usize>,
    /// Gate values implied by the relaxed sample, `softmax(...)·candidates`.
    pub relaxed: Vec<f64>,
}

impl MaskDistribution {
    /// Uniform distribution (all-zero logits).
    pub fn uniform(scheme: NMScheme) -> Result<Self> {
        let candidates = enumerate_candidates(scheme.n, scheme.m)?;
        let c = candidates.shape()[0];
        Ok(Self { scheme, candidates, logits: Tensor::zeros([scheme.blocks, c]) })
    }

    pub fn with_logits(scheme: NMScheme, logits: Tensor) -> Result<Self> {
        let mut d = Self::uniform(scheme)?;
        if logits.shape() != d.logits.shape() {
            return Err(config_err(format!(
                "mask logits have shape {:?}, expected {:?}",
                logits.shape(),
                d.logits.shape()
            )));
        }
        d.logits = logits;
        Ok(d)
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.shape()[0]
    }

    pub fn probabilities(&self) -> Vec<Vec<f64>> {
        (0..self.scheme.blocks).map(|k| softmax_row(self.logits.row(k))).collect()
    }

    pub fn entropies(&self) -> Vec<f64> {
        self.probabilities().iter().map(|p| -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()).collect()
    }

    /// Gate vector for the given per-block candidate choice.
    pub fn gates_for(&self, choice: &[usize]) -> Vec<f64> {
        choice.iter().flat_map(|&c| self.candidates.row(c).to_vec()).collect()
    }

    /// Hard sample of the full gate vector, one Gumbel draw per block.
    pub fn sample_full<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.scheme.depth());
        for k in 0..self.scheme.blocks {
            out.extend(sample_block(self.logits.row(k), &self.candidates, tau, rng)?.1);
        }
        Ok(out)
    }

    /// Differentiable draw with pre-sampled `noise` (`[K, C]`).
    ///
    /// Forward: `y = onehot(argmax(log p + g))`. Backward: gradients of
    /// `softmax((log p + g)/τ)`.
    pub fn sample_differentiable<'t>(&self, logits: Var<'t>, noise: &Tensor, tau: f64) -> Result<Draw<'t>> {
        if !(tau > 0.0) {
            return Err(config_err(format!("temperature must be positive, got {tau}")));
        }
        let tape = logits.tape();
        let perturbed = logits.log_softmax(1)?.add(tape.constant(noise.clone()))?;
        let soft = perturbed.scale(1.0 / tau).softmax(1)?;
        let (k, c) = (self.scheme.blocks, self.num_candidates());
        let z = perturbed.value();
        let choice: Vec<usize> = (0..k).map(|b| argmax(z.row(b))).collect();
        drop(z);
        let relaxed = {
            let sv = soft.value();
            let m = self.scheme.m;
            (0..self.scheme.depth())
                .map(|l| {
                    let (b, j) = (l / m, l % m);
                    (0..c).map(|i| sv.data()[b * c + i] * self.candidates.data()[i * m + j]).sum()
                })
                .collect()
        };
        let mut hard = Tensor::zeros([k, c]);
        for (b, &i) in choice.iter().enumerate() {
            hard.data_mut()[b * c + i] = 1.0;
        }
        let y = straight_through(hard, soft)?;
        let gates = y.matmul(tape.constant(self.candidates.clone()))?.reshape([self.scheme.depth()])?;
        Ok(Draw { gates, choice, relaxed })
    }

    /// Per-block argmax of the logits; lowest index wins ties.
    pub fn decide(&self) -> PruneDecision {
        let probs = self.probabilities();
        let choice: Vec<usize> = (0..self.scheme.blocks).map(|k| argmax(self.logits.row(k))).collect();
        let confidences = choice.iter().zip(&probs).map(|(&c, p)| p[c]).collect();
        let gates = self.gates_for(&choice);
        PruneDecision {
            scheme: Some(self.scheme),
            per_block_choice: choice,
            retained_layers: retained_from_gates(&gates),
            confidences,
            source_depth: self.scheme.depth(),
        }
    }
}

pub fn retained_from_gates(gates: &[f64]) -> Vec<usize> {
    gates.iter().enumerate().filter(|(_, g)| **g != 0.0).map(|(i, _)| i).collect()
}

/// Which layers of a source model survive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    /// `None` for global (non-blockwise) decisions.
    pub scheme: Option<NMScheme>,
    pub per_block_choice: Vec<usize>,
    pub retained_layers: Vec<usize>,
    pub confidences: Vec<f64>,
    pub source_depth: usize,
}

impl PruneDecision {
    /// Decision from an arbitrary binary gate vector.
    pub fn global(gates: &[f64]) -> Self {
        Self {
            scheme: None,
            per_block_choice: Vec::new(),
            retained_layers: retained_from_gates(gates),
            confidences: Vec::new(),
            source_depth: gates.len(),
        }
    }

    pub fn gates(&self) -> Vec<f64> {
        let mut g = vec![0.0; self.source_depth];
        for &i in &self.retained_layers {
            g[i] = 1.0;
        }
        g
    }

    pub fn bitstring(&self) -> String {
        self.gates().iter().map(|&g| if g != 0.0 { '1' } else { '0' }).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn candidates_descending() {
        let c = enumerate_candidates(2, 4).unwrap();
        assert_eq!(c.shape(), &[6, 4]);
        assert_eq!(c.row(0), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(c.row(5), &[0.0, 0.0, 1.0, 1.0]);
        assert!(enumerate_candidates(2, 2).is_err());
        assert!(enumerate_candidates(1, 21).is_err());
    }

    #[test]
    fn binomial_overflow_detected() {
        assert_eq!(binomial(5, 2), Some(10));
        assert_eq!(binomial(67, 33), Some(14226520737620288370));
        assert_eq!(binomial(68, 34), None);
        let s = NMScheme::new(10, 20, 20 * 30).unwrap();
        assert!(search_space_size(SearchSpace::Scheme(s)).is_err());
    }

    #[test]
    fn scheme_parsing() {
        let s: SchemeSpec = "2:4".parse().unwrap();
        assert_eq!(s.for_depth(8).unwrap().blocks, 2);
        assert!("2-4".parse::<SchemeSpec>().is_err());
        assert!(s.for_depth(6).is_err());
    }

    #[test]
    fn tau_validated() {
        let c = enumerate_candidates(1, 2).unwrap();
        assert!(sample_block(&[0.0, 0.0], &c, 0.0, &mut seeded(0, 0)).is_err());
    }

    #[test]
    fn global_decision_round_trip() {
        let d = PruneDecision::global(&[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.retained_layers, vec![0, 3]);
        assert_eq!(d.bitstring(), "1001");
        assert_eq!(d.gates(), vec![1.0, 0.0, 0.0, 1.0]);
    }
}
