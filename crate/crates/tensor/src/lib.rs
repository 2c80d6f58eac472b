//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Values live in [`Tensor`]. A forward pass records operations on a
//! [`Tape`] through [`Var`] handles; [`Tape::backward`] then produces
//! [`Gradients`] for every differentiable leaf.
//!
//! ```
//! use layerprune_tensor::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(&Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
//! let loss = x.square().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use tape::{gate, layernorm, straight_through, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward already ran on this tape; re-run the forward pass first")]
    BackwardTwice,
    #[error("backward root must hold a single value, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
