// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("empty scan: {0}")]
    EmptyScan(PathBuf),

    #[error("{path}: byte length {len} is not a multiple of {record} (malformed {kind} file)")]
    Framing {
        path: PathBuf,
        len: u64,
        record: u64,
        kind: &'static str,
    },

    #[error("label count {labels} does not match scan point count {points}")]
    LabelMismatch { labels: usize, points: usize },

    #[error("class map {path}, line {line}: {msg}")]
    ClassMap {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("all pixels are ignored; loss is undefined")]
    AllIgnored,

    #[error("confusion matrix is empty")]
    EmptyConfusion,

    #[error("range image is missing its {0} index map")]
    MissingIndexMap(&'static str),

    #[error("affinity field is not normalized")]
    Unnormalized,

    #[error("spatial size {height}x{width} is not divisible by {multiple}")]
    Indivisible {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss ({detail})")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("class count mismatch: model has {model} classes, data has {data}")]
    ClassCount { model: usize, data: usize },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
