use std::path::PathBuf;

use thiserror::Error;

use crate::volume::PlaneAxis;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for extent {extent} along {axis:?}")]
    Index {
        axis: PlaneAxis,
        index: usize,
        extent: usize,
    },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("annotation error on {axis:?} plane: {message}")]
    Annotation { axis: PlaneAxis, message: String },

    #[error("weight mass is zero; the loss term is undefined")]
    DegenerateWeight,

    #[error("embedding lookup failed for {key:?}; available keys: {available:?}")]
    Embedding { key: String, available: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("mask is empty: {0}")]
    EmptyMask(&'static str),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
