use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape: {0}")]
    InputShape(String),
    #[error("timestep {t} outside scheduler range [0, {max}]")]
    Timestep { t: usize, max: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error("{k} classes requested but capacity is {capacity}")]
    ClassCount { k: usize, capacity: usize },
    #[error("aggregation: {0}")]
    Aggregation(String),
    #[error("label {label} at ({y}, {x}) is not below class count {k}")]
    LabelRange {
        label: u8,
        k: usize,
        y: usize,
        x: usize,
    },
    #[error("incompatible checkpoint: expected backbone {expected}, found {found}")]
    Compatibility { expected: String, found: String },
    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("optimization diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("split: {0}")]
    Split(String),
    #[error("eval: {0}")]
    Eval(String),
    #[error("table emission: {0}")]
    Emission(String),
    #[error("ingestion: {0}")]
    Ingestion(String),
    #[error("backbone unavailable: {0}")]
    Unavailable(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}
