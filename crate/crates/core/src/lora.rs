//! Low-rank weight updates `ΔW = α·B·A` on every block linear map.

use layerprune_tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::model::ToyDiT;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraConfig {
    pub rank: usize,
    /// Scale on `B·A`. `None` means `16 / rank`.
    pub alpha: Option<f64>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: None }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha.unwrap_or(16.0 / self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(config_err("prune.learn.lora.rank must be positive"));
        }
        if !(self.scale() > 0.0 && self.scale().is_finite()) {
            return Err(config_err("prune.learn.lora.alpha must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<P> {
    /// `[rank, in]`
    pub a: P,
    /// `[out, rank]`
    pub b: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLora<P> {
    pub q: LoraPair<P>,
    pub k: LoraPair<P>,
    pub v: LoraPair<P>,
    pub o: LoraPair<P>,
    pub up: LoraPair<P>,
    pub down: LoraPair<P>,
}

impl<P> BlockLora<P> {
    fn pairs(&self) -> [(&'static str, &LoraPair<P>); 6] {
        [("q", &self.q), ("k", &self.k), ("v", &self.v), ("o", &self.o), ("up", &self.up), ("down", &self.down)]
    }

    fn pairs_mut(&mut self) -> [(&'static str, &mut LoraPair<P>); 6] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
            ("up", &mut self.up),
            ("down", &mut self.down),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraParams<P> {
    pub blocks: Vec<BlockLora<P>>,
}

impl<P> LoraParams<P> {
    pub fn map<Q>(&self, f: &mut dyn FnMut(&str, &P) -> Q) -> LoraParams<Q> {
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let mut pair = |name: &str, p: &LoraPair<P>| LoraPair {
                    a: f(&format!("lora.{i}.{name}.a"), &p.a),
                    b: f(&format!("lora.{i}.{name}.b"), &p.b),
                };
                BlockLora {
                    q: pair("q", &b.q),
                    k: pair("k", &b.k),
                    v: pair("v", &b.v),
                    o: pair("o", &b.o),
                    up: pair("up", &b.up),
                    down: pair("down", &b.down),
                }
            })
            .collect();
        LoraParams { blocks }
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut P)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, p) in b.pairs_mut() {
                f(&format!("lora.{i}.{name}.a"), &mut p.a);
                f(&format!("lora.{i}.{name}.b"), &mut p.b);
            }
        }
    }

    pub fn flat_mut(&mut self) -> Vec<&mut P> {
        let mut out = Vec::new();
        for b in self.blocks.iter_mut() {
            for (_, p) in b.pairs_mut() {
                out.push(&mut p.a);
                out.push(&mut p.b);
            }
        }
        out
    }

    pub fn visit(&self, f: &mut dyn FnMut(&str, &P)) {
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, p) in b.pairs() {
                f(&format!("lora.{i}.{name}.a"), &p.a);
                f(&format!("lora.{i}.{name}.b"), &p.b);
            }
        }
    }
}

/// Adapter set for one model plus its scale.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub params: LoraParams<Tensor>,
    pub alpha: f64,
    pub rank: usize,
}

impl LoraAdapter {
    /// `B = 0`, `A ~ N(0, 1/rank)`.
    pub fn init<R: Rng + ?Sized>(model: &ToyDiT, cfg: &LoraConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let r = cfg.rank;
        let std = (1.0 / r as f64).sqrt();
        let mut pair = |lin: &crate::model::Linear<Tensor>| {
            let (out, inp) = (lin.weight.shape()[0], lin.weight.shape()[1]);
            LoraPair { a: Tensor::randn([r, inp], std, rng), b: Tensor::zeros([out, r]) }
        };
        let blocks = model
            .params
            .blocks
            .iter()
            .map(|b| BlockLora {
                q: pair(&b.q),
                k: pair(&b.k),
                v: pair(&b.v),
                o: pair(&b.o),
                up: pair(&b.up),
                down: pair(&b.down),
            })
            .collect();
        Ok(Self { params: LoraParams { blocks }, alpha: cfg.scale(), rank: r })
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> LoraParams<Var<'t>> {
        self.params.map(&mut |_, t| if trainable { tape.param(t) } else { tape.constant(t.clone()) })
    }

    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t| n += t.numel());
        n
    }

    /// `α·B·A` for one map, `[out, in]`.
    pub fn delta(pair: &LoraPair<Tensor>, alpha: f64) -> Tensor {
        let (out, r) = (pair.b.shape()[0], pair.b.shape()[1]);
        let inp = pair.a.shape()[1];
        Tensor::from_fn([out, inp], |idx| {
            let (i, j) = (idx / inp, idx % inp);
            alpha * (0..r).map(|p| pair.b.data()[i * r + p] * pair.a.data()[p * inp + j]).sum::<f64>()
        })
    }
}
