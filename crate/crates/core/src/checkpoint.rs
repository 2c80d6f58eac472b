//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"TFCK" | u32 version | u64 meta_len | meta (JSON) | u32 blob_count |
//! blob*: u32 name_len | name | u32 rank | u64 dims[rank] | u64 numel | f64 values[numel]
//! ```
//!
//! Model weights use their parameter names, EMA weights carry an `ema.`
//! prefix, and a learned mask distribution is stored as `mask_logits`.

use std::io::{Read, Write};
use std::path::Path;

use layerprune_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DiTParams, ToyDiT, ToyDiTConfig};

pub const MAGIC: &[u8; 4] = b"TFCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ToyDiTConfig,
    /// Source-model layer index for each stored block, when pruned.
    pub retained_layers: Option<Vec<usize>>,
    pub step: usize,
    pub seed: u64,
    pub ema_decay: f64,
    pub kind: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: ToyDiT,
    pub ema: Option<ToyDiT>,
    pub mask_logits: Option<Tensor>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, t.rank() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    put_u64(out, t.numel() as u64);
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn blob(&mut self) -> Result<(String, Tensor)> {
        let name_len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(name_len)?)
            .map_err(|_| Error::Format("blob name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.len()).collect::<Result<Vec<_>>>()?;
        let numel = self.len()?;
        let bytes = self.take(numel.checked_mul(8).ok_or_else(|| Error::Format("blob too large".into()))?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("blob {name}: {e}")))?;
        Ok((name, t))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let meta = serde_json::to_vec(&self.meta)?;
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(&meta);

        let mut blobs: Vec<(String, &Tensor)> = Vec::new();
        let names = self.model.params.names();
        blobs.extend(names.iter().cloned().zip(self.model.params.flat()));
        if let Some(ema) = &self.ema {
            blobs.extend(ema.params.names().into_iter().map(|n| format!("ema.{n}")).zip(ema.params.flat()));
        }
        if let Some(l) = &self.mask_logits {
            blobs.push(("mask_logits".into(), l));
        }
        put_u32(&mut out, blobs.len() as u32);
        for (name, t) in blobs {
            put_blob(&mut out, &name, t);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.len()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut blobs = std::collections::BTreeMap::new();
        for _ in 0..count {
            let (name, t) = r.blob()?;
            if blobs.insert(name.clone(), t).is_some() {
                return Err(Error::Format(format!("duplicate blob {name}")));
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after last blob".into()));
        }
        let model = fill(&meta.model, &mut blobs, "")?;
        let has_ema = blobs.keys().any(|k| k.starts_with("ema."));
        let ema = if has_ema { Some(fill(&meta.model, &mut blobs, "ema.")?) } else { None };
        let mask_logits = blobs.remove("mask_logits");
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::Format(format!("unexpected blob {extra}")));
        }
        Ok(Self { meta, model, ema, mask_logits })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Weights used for evaluation and as a pruning source: EMA when present.
    pub fn eval_model(&self) -> &ToyDiT {
        self.ema.as_ref().unwrap_or(&self.model)
    }
}

fn fill(cfg: &ToyDiTConfig, blobs: &mut std::collections::BTreeMap<String, Tensor>, prefix: &str) -> Result<ToyDiT> {
    // shapes come from a freshly initialised template of the same config
    let mut template = ToyDiT::init(cfg.clone(), &mut crate::rng::seeded(0, 0))?;
    let mut missing = None;
    let params: &mut DiTParams<Tensor> = &mut template.params;
    params.for_each_mut(&mut |name, slot| {
        let key = format!("{prefix}{name}");
        match blobs.remove(&key) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            Some(t) => {
                missing.get_or_insert(format!("blob {key} has shape {:?}, expected {:?}", t.shape(), slot.shape()));
            }
            None => {
                missing.get_or_insert(format!("missing blob {key}"));
            }
        }
    });
    match missing {
        Some(msg) => Err(Error::Format(msg)),
        None => Ok(template),
    }
}
