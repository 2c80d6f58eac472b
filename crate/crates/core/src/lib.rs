//! Learnable N:M depth pruning for small diffusion transformers.
//!
//! The crate trains a toy denoiser on a 2-D Gaussian mixture, learns which
//! layers to drop with a Gumbel-softmax mask sampler, compares that against
//! metric-based baselines, and recovers the pruned model with plain or
//! distilled fine-tuning.

pub mod baselines;
pub mod checkpoint;
pub mod distill;
pub mod error;
pub mod eval;
pub mod lora;
pub mod mask;
pub mod model;
pub mod optim;
pub mod recover;
pub mod rng;
pub mod task;
pub mod train;

pub use layerprune_tensor as tensor;

pub use error::{Error, Result};
pub use lora::{LoraAdapter, LoraConfig};
pub use model::{forward, diffusion_loss, Gates, ToyDiT, ToyDiTConfig};
pub use task::{Batch, DiffusionTask, NoiseSchedule, Point, TaskConfig};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/library.md")]
    struct Library;
    #[doc = include_str!("../../../book/src/masks.md")]
    struct Masks;
    #[doc = include_str!("../../../book/src/recovery.md")]
    struct Recovery;
}
