use layerprune_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss {loss}; first non-finite activation at {}", describe_layer(*layer))]
    NonFiniteLoss { loss: f64, layer: Option<usize> },
    #[error("non-finite loss at step {step} with sampled gates {gates:?}")]
    NonFiniteStep { step: usize, gates: Vec<f64> },
    #[error("non-finite distillation loss at step {step}: kd={kd} diff={diff} rep={rep}")]
    NonFiniteDistill { step: usize, kd: f64, diff: f64, rep: f64 },
    #[error("training diverged at step {step}: loss {loss} stayed above 10x the initial loss {initial} for {window} steps")]
    Diverged { step: usize, loss: f64, initial: f64, window: usize },
    #[error("depth mismatch: decision expects a {expected}-layer model, got {actual}")]
    DepthMismatch { expected: usize, actual: usize },
    #[error("representation distillation needs a block-wise decision")]
    RepKdUnavailable,
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn describe_layer(layer: Option<usize>) -> String {
    match layer {
        Some(i) => format!("layer {i}"),
        None => "the embedding/output stage".to_string(),
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}
