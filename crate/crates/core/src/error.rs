use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: every entry of a normalized slice is masked")]
    DegenerateSlice { op: &'static str },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value while evaluating parameter {param} at coordinate {coordinate:?}")]
    Evaluation {
        param: usize,
        coordinate: Vec<usize>,
    },

    #[error("training diverged: non-finite {what} in `{name}` at step {step}")]
    Training {
        what: &'static str,
        name: String,
        step: u64,
    },

    #[error("scene spec: {0}")]
    Scene(String),

    #[error("format: {0}")]
    Format(String),

    #[error("checkpoint does not match the model configuration: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
