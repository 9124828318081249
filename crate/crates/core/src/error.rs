use std::path::PathBuf;

/// Everything that can go wrong inside the lab.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unbound leaf `{0}`")]
    UnboundLeaf(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("gradient requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("incompatible parameter maps: {0}")]
    Incompatible(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("linear probe did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    ProbeNotConverged { iterations: usize, grad_norm: f64 },

    #[error("corrupt checkpoint {path:?}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
