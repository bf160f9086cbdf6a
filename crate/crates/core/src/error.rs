use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("malformed tensor file: {0}")]
    Tensor(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The layout has no CLS token; callers should switch to the key-mean
    /// equivalent (`cls_mode = "key_mean_equivalent"`).
    #[error("layout has no CLS token; use cls_mode \"key_mean_equivalent\" instead")]
    AbsentCls,

    #[error("decoder-side reduction requires at least one text token")]
    NoText,

    #[error("infeasible budget: {0}")]
    Budget(String),

    #[error("arithmetic overflow in FLOPs computation: {0}")]
    Overflow(&'static str),

    #[error("invalid trace: {0}")]
    Trace(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable error class name, used for structured error output.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::AbsentCls => "absent_cls",
            Error::NoText => "no_text",
            Error::Budget(_) => "budget",
            Error::Overflow(_) => "overflow",
            Error::Trace(_) => "trace",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
