//! Toy DiT-style denoiser with per-layer residual gates.
//!
//! Each of the `depth` blocks is one prunable unit holding attention and MLP
//! together. A gate value `m_i` routes the block as
//! `x_{i+1} = m_i·φ_i(x_i) + (1 − m_i)·x_i`; a zero gate makes the block an
//! exact pass-through.

use std::rc::Rc;

use layerprune_tensor::{gate, layernorm, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::lora::{BlockLora, LoraParams};
use crate::task::{Batch, NoiseSchedule, Point};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDiTConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub seq_len: usize,
    pub in_dim: usize,
    pub num_timesteps: usize,
    /// 0 means unconditional.
    pub num_classes: usize,
}

impl Default for ToyDiTConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            seq_len: 16,
            in_dim: 2,
            num_timesteps: 100,
            num_classes: 0,
        }
    }
}

impl ToyDiTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("seq_len", self.seq_len),
            ("in_dim", self.in_dim),
            ("num_timesteps", self.num_timesteps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("model.{name} must be positive")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(config_err(format!(
                "model.hidden_dim ({}) must be divisible by model.heads ({})",
                self.hidden_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(config_err("model.mlp_ratio must be positive"));
        }
        if self.in_dim != 2 {
            return Err(config_err("model.in_dim must be 2 for the planar mixture task"));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    /// `[out, in]`
    pub weight: P,
    /// `[out]`
    pub bias: P,
}

impl<P> Linear<P> {
    pub fn map<Q>(&self, name: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear { weight: f(&format!("{name}.weight"), &self.weight), bias: f(&format!("{name}.bias"), &self.bias) }
    }

    pub fn for_each_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&format!("{name}.weight"), &mut self.weight);
        f(&format!("{name}.bias"), &mut self.bias);
    }
}

/// Parameters of one transformer block, the unit of depth pruning.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<P> {
    pub ln1_gain: P,
    pub ln1_bias: P,
    pub q: Linear<P>,
    pub k: Linear<P>,
    pub v: Linear<P>,
    pub o: Linear<P>,
    pub ln2_gain: P,
    pub ln2_bias: P,
    pub up: Linear<P>,
    pub down: Linear<P>,
}

impl<P> Block<P> {
    pub fn map<Q>(&self, name: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> Block<Q> {
        Block {
            ln1_gain: f(&format!("{name}.ln1.gain"), &self.ln1_gain),
            ln1_bias: f(&format!("{name}.ln1.bias"), &self.ln1_bias),
            q: self.q.map(&format!("{name}.attn.q"), f),
            k: self.k.map(&format!("{name}.attn.k"), f),
            v: self.v.map(&format!("{name}.attn.v"), f),
            o: self.o.map(&format!("{name}.attn.o"), f),
            ln2_gain: f(&format!("{name}.ln2.gain"), &self.ln2_gain),
            ln2_bias: f(&format!("{name}.ln2.bias"), &self.ln2_bias),
            up: self.up.map(&format!("{name}.mlp.up"), f),
            down: self.down.map(&format!("{name}.mlp.down"), f),
        }
    }

    pub fn for_each_mut(&mut self, name: &str, f: &mut dyn FnMut(&str, &mut P)) {
        f(&format!("{name}.ln1.gain"), &mut self.ln1_gain);
        f(&format!("{name}.ln1.bias"), &mut self.ln1_bias);
        self.q.for_each_mut(&format!("{name}.attn.q"), f);
        self.k.for_each_mut(&format!("{name}.attn.k"), f);
        self.v.for_each_mut(&format!("{name}.attn.v"), f);
        self.o.for_each_mut(&format!("{name}.attn.o"), f);
        f(&format!("{name}.ln2.gain"), &mut self.ln2_gain);
        f(&format!("{name}.ln2.bias"), &mut self.ln2_bias);
        self.up.for_each_mut(&format!("{name}.mlp.up"), f);
        self.down.for_each_mut(&format!("{name}.mlp.down"), f);
    }
}

/// Full parameter set. `P = Tensor` for storage, `P = Var` once bound to a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct DiTParams<P> {
    pub input: Linear<P>,
    /// `[seq_len, hidden]`
    pub pos_embed: P,
    /// Projects the sinusoidal timestep features.
    pub time: Linear<P>,
    /// `[num_classes, hidden]`
    pub class_embed: Option<P>,
    pub blocks: Vec<Block<P>>,
    pub final_gain: P,
    pub final_bias: P,
    pub output: Linear<P>,
}

impl<P> DiTParams<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> DiTParams<Q> {
        DiTParams {
            input: self.input.map("input", f),
            pos_embed: f("pos_embed", &self.pos_embed),
            time: self.time.map("time", f),
            class_embed: self.class_embed.as_ref().map(|c| f("class_embed", c)),
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("blocks.{i}"), f)).collect(),
            final_gain: f("final_norm.gain", &self.final_gain),
            final_bias: f("final_norm.bias", &self.final_bias),
            output: self.output.map("output", f),
        }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        self.input.for_each_mut("input", f);
        f("pos_embed", &mut self.pos_embed);
        self.time.for_each_mut("time", f);
        if let Some(c) = self.class_embed.as_mut() {
            f("class_embed", c);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{i}"), f);
        }
        f("final_norm.gain", &mut self.final_gain);
        f("final_norm.bias", &mut self.final_bias);
        self.output.for_each_mut("output", f);
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &P)) {
        self.map(&mut |name, p| f(name, p));
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |name, _| out.push(name.to_string()));
        out
    }
}

impl DiTParams<Tensor> {
    pub fn flat(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        collect_refs(self, &mut out);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        let DiTParams { input, pos_embed, time, class_embed, blocks, final_gain, final_bias, output } = self;
        out.extend([&mut input.weight, &mut input.bias, pos_embed, &mut time.weight, &mut time.bias]);
        out.extend(class_embed.as_mut());
        for b in blocks.iter_mut() {
            let Block { ln1_gain, ln1_bias, q, k, v, o, ln2_gain, ln2_bias, up, down } = b;
            out.extend([ln1_gain, ln1_bias]);
            for l in [q, k, v, o] {
                out.extend([&mut l.weight, &mut l.bias]);
            }
            out.extend([ln2_gain, ln2_bias]);
            for l in [up, down] {
                out.extend([&mut l.weight, &mut l.bias]);
            }
        }
        out.extend([final_gain, final_bias, &mut output.weight, &mut output.bias]);
        out
    }
}

fn collect_refs<'a>(p: &'a DiTParams<Tensor>, out: &mut Vec<&'a Tensor>) {
    let lin = |l: &'a Linear<Tensor>, out: &mut Vec<&'a Tensor>| {
        out.push(&l.weight);
        out.push(&l.bias);
    };
    lin(&p.input, out);
    out.push(&p.pos_embed);
    lin(&p.time, out);
    if let Some(c) = &p.class_embed {
        out.push(c);
    }
    for b in &p.blocks {
        out.push(&b.ln1_gain);
        out.push(&b.ln1_bias);
        for l in [&b.q, &b.k, &b.v, &b.o] {
            lin(l, out);
        }
        out.push(&b.ln2_gain);
        out.push(&b.ln2_bias);
        lin(&b.up, out);
        lin(&b.down, out);
    }
    out.push(&p.final_gain);
    out.push(&p.final_bias);
    lin(&p.output, out);
}

/// Tokenized model input: each point repeated `seq_len` times.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// `[batch·seq_len, in_dim]`
    pub tokens: Tensor,
    pub t: Vec<usize>,
    pub labels: Option<Vec<usize>>,
}

impl ModelInput {
    pub fn batch(&self) -> usize {
        self.t.len()
    }
}

/// How block gates are applied during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Gates<'a, 't> {
    /// Every block active.
    All,
    /// Constant gate values. Zero gates skip the block entirely.
    Fixed(&'a [f64]),
    /// Differentiable gate vector from the mask sampler. `pruned` sets the
    /// gradient that gated-off blocks receive on their own parameters.
    Sampled { gates: Var<'t>, pruned: PrunedGrad<'a> },
}

/// Gradient reaching the parameters of a block whose sampled gate is 0.
#[derive(Clone, Copy, Debug)]
pub enum PrunedGrad<'a> {
    /// `m·g` with the hard gate value, i.e. nothing.
    Gate,
    /// The full upstream gradient `g`.
    Full,
    /// `m̃·g` with the relaxed (soft) gate value of each layer.
    Relaxed(&'a [f64]),
}

impl PrunedGrad<'_> {
    fn weight(&self, layer: usize) -> Option<f64> {
        match self {
            PrunedGrad::Gate => None,
            PrunedGrad::Full => Some(1.0),
            PrunedGrad::Relaxed(w) => Some(w[layer]),
        }
    }
}

/// Values recorded by a forward pass.
pub struct ForwardPass<'t> {
    /// `[batch·seq_len, in_dim]` noise prediction per token.
    pub output: Var<'t>,
    /// Hidden state entering block 0.
    pub embedded: Var<'t>,
    /// Hidden state after each block, one per configured layer.
    pub hidden: Vec<Var<'t>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDiT {
    pub config: ToyDiTConfig,
    pub params: DiTParams<Tensor>,
}

fn init_linear<R: Rng + ?Sized>(out: usize, inp: usize, std: f64, rng: &mut R) -> Linear<Tensor> {
    Linear { weight: Tensor::randn([out, inp], std, rng), bias: Tensor::zeros([out]) }
}

impl ToyDiT {
    pub fn init<R: Rng + ?Sized>(config: ToyDiTConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let h = config.mlp_hidden();
        let fan = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = 1.0 / ((2 * config.depth) as f64).sqrt();
        let input = init_linear(d, config.in_dim, fan(config.in_dim), rng);
        let pos_embed = Tensor::randn([config.seq_len, d], 0.1, rng);
        let time = init_linear(d, d, fan(d), rng);
        let class_embed = (config.num_classes > 0).then(|| Tensor::randn([config.num_classes, d], 0.1, rng));
        let blocks = (0..config.depth)
            .map(|_| Block {
                ln1_gain: Tensor::ones([d]),
                ln1_bias: Tensor::zeros([d]),
                q: init_linear(d, d, fan(d), rng),
                k: init_linear(d, d, fan(d), rng),
                v: init_linear(d, d, fan(d), rng),
                o: init_linear(d, d, fan(d) * resid, rng),
                ln2_gain: Tensor::ones([d]),
                ln2_bias: Tensor::zeros([d]),
                up: init_linear(h, d, fan(d), rng),
                down: init_linear(d, h, fan(h) * resid, rng),
            })
            .collect();
        // zero output head: the untrained model predicts ε̂ = 0
        let output = Linear { weight: Tensor::zeros([config.in_dim, d]), bias: Tensor::zeros([config.in_dim]) };
        let params = DiTParams {
            input,
            pos_embed,
            time,
            class_embed,
            blocks,
            final_gain: Tensor::ones([d]),
            final_bias: Tensor::zeros([d]),
            output,
        };
        Ok(Self { config, params })
    }

    pub fn depth(&self) -> usize {
        self.params.blocks.len()
    }

    /// Binds every parameter to `tape`, differentiable iff `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> DiTParams<Var<'t>> {
        self.params.map(&mut |_, t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.flat().iter().map(|t| t.numel()).sum()
    }

    /// Parameters held by block `layer`.
    pub fn block_parameter_count(&self, layer: usize) -> usize {
        let mut n = 0;
        self.params.blocks[layer].map("b", &mut |_, t| n += t.numel());
        n
    }

    /// Physically shrunken copy containing only `keep` (in the given order).
    pub fn with_layers(&self, keep: &[usize]) -> Result<ToyDiT> {
        if let Some(bad) = keep.iter().find(|&&i| i >= self.depth()) {
            return Err(config_err(format!("layer {bad} out of range for depth {}", self.depth())));
        }
        let mut params = self.params.clone();
        params.blocks = keep.iter().map(|&i| self.params.blocks[i].clone()).collect();
        let config = ToyDiTConfig { depth: keep.len(), ..self.config.clone() };
        Ok(ToyDiT { config, params })
    }

    /// Copy with exact identity blocks inserted so they land at
    /// `positions` (indices in the returned model, ascending). The result
    /// computes the same function as `self`.
    pub fn with_identity_layers(&self, positions: &[usize]) -> Result<ToyDiT> {
        let depth = self.depth() + positions.len();
        if positions.windows(2).any(|w| w[0] >= w[1]) || positions.last().is_some_and(|&p| p >= depth) {
            return Err(config_err("identity positions must be strictly increasing and in range"));
        }
        let mut params = self.params.clone();
        let mut source = self.params.blocks.iter();
        params.blocks = (0..depth)
            .map(|i| match positions.binary_search(&i) {
                Ok(_) => self.params.blocks[0].clone(),
                Err(_) => source.next().expect("position count matches depth").clone(),
            })
            .collect();
        let mut out = ToyDiT { config: ToyDiTConfig { depth, ..self.config.clone() }, params };
        for &p in positions {
            out.plant_identity(p);
        }
        Ok(out)
    }

    /// Zeroes the residual branches of `layer`, making `φ(x) = x` exactly.
    pub fn plant_identity(&mut self, layer: usize) {
        let b = &mut self.params.blocks[layer];
        for t in [&mut b.o.weight, &mut b.o.bias, &mut b.down.weight, &mut b.down.bias] {
            t.data_mut().fill(0.0);
        }
    }

    /// Tokenizes noisy points for this model.
    pub fn input_for(&self, points: &[Point], t: &[usize], labels: Option<&[usize]>) -> ModelInput {
        let seq = self.config.seq_len;
        let mut data = Vec::with_capacity(points.len() * seq * 2);
        for p in points {
            for _ in 0..seq {
                data.extend_from_slice(p);
            }
        }
        let tokens = Tensor::new([points.len() * seq, 2], data).expect("token shape");
        let labels = if self.config.num_classes > 0 {
            labels.map(|l| l.iter().map(|c| c % self.config.num_classes).collect())
        } else {
            None
        };
        ModelInput { tokens, t: t.to_vec(), labels }
    }

    pub fn batch_input(&self, batch: &Batch, schedule: &NoiseSchedule) -> ModelInput {
        self.input_for(&batch.noisy_points(schedule), &batch.t, batch.labels.as_deref())
    }

    /// Per-token noise target for `batch`, matching the output layout.
    pub fn noise_target(&self, batch: &Batch) -> Tensor {
        let seq = self.config.seq_len;
        let mut data = Vec::with_capacity(batch.len() * seq * 2);
        for e in &batch.noise {
            for _ in 0..seq {
                data.extend_from_slice(e);
            }
        }
        Tensor::new([batch.len() * seq, 2], data).expect("target shape")
    }

    /// Gradient-free forward returning the per-token prediction.
    pub fn predict(&self, input: &ModelInput, gates: &[f64]) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let pass = forward(&self.config, &p, None, input, Gates::Fixed(gates))?;
        let out = pass.output.to_tensor();
        Ok(out)
    }

    /// Hidden state entering each block followed by the final block output:
    /// `depth + 1` tensors of shape `[batch·seq_len, hidden]`.
    pub fn hidden_states(&self, input: &ModelInput, gates: &[f64]) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let pass = forward(&self.config, &p, None, input, Gates::Fixed(gates))?;
        let mut out = vec![pass.embedded.to_tensor()];
        out.extend(pass.hidden.iter().map(|h| h.to_tensor()));
        Ok(out)
    }

    /// Noise estimate per point (mean of the token predictions).
    pub fn predict_noise(&self, points: &[Point], t: &[usize], labels: Option<&[usize]>, gates: &[f64]) -> Result<Vec<Point>> {
        let out = self.predict(&self.input_for(points, t, labels), gates)?;
        let seq = self.config.seq_len;
        Ok((0..points.len())
            .map(|b| {
                let mut acc = [0.0, 0.0];
                for s in 0..seq {
                    let row = out.row(b * seq + s);
                    acc[0] += row[0];
                    acc[1] += row[1];
                }
                [acc[0] / seq as f64, acc[1] / seq as f64]
            })
            .collect())
    }

    /// ε-prediction MSE on `batch` with constant gates, no gradients.
    /// Non-finite values are returned as is.
    pub fn loss_value(&self, batch: &Batch, schedule: &NoiseSchedule, gates: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let p = self.bind(&tape, false);
        let input = self.batch_input(batch, schedule);
        let pass = forward(&self.config, &p, None, &input, Gates::Fixed(gates))?;
        let target = tape.constant(self.noise_target(batch));
        Ok(pass.output.mse(target)?.item())
    }

    pub fn all_on(&self) -> Vec<f64> {
        vec![1.0; self.depth()]
    }
}

fn sinusoidal(t: usize, dim: usize) -> impl Iterator<Item = f64> {
    let half = dim / 2;
    (0..dim).map(move |i| {
        if i >= 2 * half {
            return 0.0;
        }
        let k = i % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        if i < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

/// Sinusoidal features for each timestep, `[batch, dim]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let data = t.iter().flat_map(|&s| sinusoidal(s, dim)).collect();
    Tensor::new([t.len(), dim], data).expect("timestep feature shape")
}

struct HeadLayout {
    split: Rc<[usize]>,
    merge: Rc<[usize]>,
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

impl HeadLayout {
    fn new(batch: usize, seq: usize, heads: usize, head_dim: usize) -> Self {
        let d = heads * head_dim;
        let n = batch * seq * d;
        let mut split = vec![0; n];
        let mut merge = vec![0; n];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    for j in 0..head_dim {
                        let headed = ((b * heads + h) * seq + t) * head_dim + j;
                        let flat = (b * seq + t) * d + h * head_dim + j;
                        split[headed] = flat;
                        merge[flat] = headed;
                    }
                }
            }
        }
        Self { split: split.into(), merge: merge.into(), batch, seq, heads, head_dim }
    }

    fn split<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.gather(self.split.clone(), [self.batch * self.heads, self.seq, self.head_dim])?)
    }

    fn merge<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.gather(self.merge.clone(), [self.batch * self.seq, self.heads * self.head_dim])?)
    }
}

fn linear<'t>(x: Var<'t>, lin: &Linear<Var<'t>>, lora: Option<(&crate::lora::LoraPair<Var<'t>>, f64)>) -> Result<Var<'t>> {
    let base = x.matmul_nt(lin.weight)?.add(lin.bias)?;
    match lora {
        None => Ok(base),
        Some((pair, alpha)) => {
            let delta = x.matmul_nt(pair.a)?.matmul_nt(pair.b)?.scale(alpha);
            Ok(base.add(delta)?)
        }
    }
}

fn block_forward<'t>(
    b: &Block<Var<'t>>,
    lora: Option<(&BlockLora<Var<'t>>, f64)>,
    x: Var<'t>,
    layout: &HeadLayout,
) -> Result<Var<'t>> {
    let pick = |f: for<'a> fn(&'a BlockLora<Var<'t>>) -> &'a crate::lora::LoraPair<Var<'t>>| lora.map(|(l, a)| (f(l), a));
    let h = layernorm(x, b.ln1_gain, b.ln1_bias, LN_EPS)?;
    let q = layout.split(linear(h, &b.q, pick(|l| &l.q))?)?;
    let k = layout.split(linear(h, &b.k, pick(|l| &l.k))?)?;
    let v = layout.split(linear(h, &b.v, pick(|l| &l.v))?)?;
    let scores = q.bmm_nt(k)?.scale(1.0 / (layout.head_dim as f64).sqrt());
    let ctx = scores.softmax(2)?.bmm(v)?;
    let attn = linear(layout.merge(ctx)?, &b.o, pick(|l| &l.o))?;
    let x = x.add(attn)?;
    let h = layernorm(x, b.ln2_gain, b.ln2_bias, LN_EPS)?;
    let up = linear(h, &b.up, pick(|l| &l.up))?.gelu();
    let mlp = linear(up, &b.down, pick(|l| &l.down))?;
    Ok(x.add(mlp)?)
}

/// Gated forward pass over bound parameters.
pub fn forward<'t>(
    config: &ToyDiTConfig,
    p: &DiTParams<Var<'t>>,
    lora: Option<(&LoraParams<Var<'t>>, f64)>,
    input: &ModelInput,
    gates: Gates<'_, 't>,
) -> Result<ForwardPass<'t>> {
    let depth = p.blocks.len();
    match gates {
        Gates::Fixed(g) if g.len() != depth => {
            return Err(config_err(format!("mask length {} != model depth {depth}", g.len())));
        }
        Gates::Sampled { gates, .. } if gates.value().numel() != depth => {
            return Err(config_err(format!("mask length {} != model depth {depth}", gates.value().numel())));
        }
        _ => {}
    }
    if let Some((l, _)) = lora {
        if l.blocks.len() != depth {
            return Err(config_err("LoRA adapter depth does not match the model"));
        }
    }
    let tape = p.pos_embed.tape();
    let batch = input.batch();
    let seq = config.seq_len;
    let d = config.hidden_dim;
    if input.tokens.shape() != [batch * seq, config.in_dim] {
        return Err(config_err(format!("token tensor {:?} does not match batch {batch}", input.tokens.shape())));
    }
    if let Some(bad) = input.t.iter().find(|&&t| t >= config.num_timesteps) {
        return Err(config_err(format!("timestep {bad} out of range")));
    }

    let tokens = tape.constant(input.tokens.clone());
    let repeat: Vec<usize> = (0..batch).flat_map(|b| std::iter::repeat_n(b, seq)).collect();
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let tfeat = tape.constant(timestep_features(&input.t, d));
    let temb = linear(tfeat, &p.time, None)?.rows(&repeat)?;
    let mut x = linear(tokens, &p.input, None)?.add(p.pos_embed.rows(&positions)?)?.add(temb)?;
    if let (Some(table), Some(labels)) = (p.class_embed, input.labels.as_ref()) {
        let rows: Vec<usize> = labels.iter().flat_map(|&c| std::iter::repeat_n(c, seq)).collect();
        x = x.add(table.rows(&rows)?)?;
    }
    let embedded = x;

    let layout = HeadLayout::new(batch, seq, config.heads, config.head_dim());
    let mut hidden = Vec::with_capacity(depth);
    for (i, block) in p.blocks.iter().enumerate() {
        let bl = lora.map(|(l, a)| (&l.blocks[i], a));
        x = match gates {
            Gates::All => block_forward(block, bl, x, &layout)?,
            Gates::Fixed(g) if g[i] == 0.0 => x,
            Gates::Fixed(g) if g[i] == 1.0 => block_forward(block, bl, x, &layout)?,
            Gates::Fixed(g) => {
                let phi = block_forward(block, bl, x, &layout)?;
                gate(phi, x, tape.constant(Tensor::new([depth], g.to_vec())?), i, None)?
            }
            Gates::Sampled { gates, pruned } => {
                let off = gates.value().data()[i] == 0.0;
                // a gated-off block still trained through its own gradient
                // must not send a second contribution upstream
                let weight = if off { pruned.weight(i) } else { None };
                let src = if weight.is_some() { x.detach() } else { x };
                let phi = block_forward(block, bl, src, &layout)?;
                gate(phi, x, gates, i, weight)?
            }
        };
        hidden.push(x);
    }
    let h = layernorm(x, p.final_gain, p.final_bias, LN_EPS)?;
    let output = linear(h, &p.output, None)?;
    Ok(ForwardPass { output, embedded, hidden })
}

/// Index of the first non-finite hidden state, `None` when only the output is.
pub fn first_non_finite(pass: &ForwardPass<'_>) -> Option<usize> {
    pass.hidden.iter().position(|h| !h.value().is_finite())
}

/// ε-prediction MSE with gradients, failing on a non-finite loss.
pub fn diffusion_loss<'t>(
    model: &ToyDiT,
    params: &DiTParams<Var<'t>>,
    lora: Option<(&LoraParams<Var<'t>>, f64)>,
    batch: &Batch,
    schedule: &NoiseSchedule,
    gates: Gates<'_, 't>,
) -> Result<Var<'t>> {
    let input = model.batch_input(batch, schedule);
    let pass = forward(&model.config, params, lora, &input, gates)?;
    let tape = pass.output.tape();
    let loss = pass.output.mse(tape.constant(model.noise_target(batch)))?;
    if !loss.item().is_finite() {
        return Err(Error::NonFiniteLoss { loss: loss.item(), layer: first_non_finite(&pass) });
    }
    Ok(loss)
}
