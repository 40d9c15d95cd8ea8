//! Image files, dataset manifests, checkpoints and configuration text.

pub mod checkpoint;
pub mod config;
mod image_io;
pub mod manifest;

use std::path::PathBuf;

use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use image_io::{list_images, load_image, save_image, BitDepth};
pub use manifest::{Manifest, Sample};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unsupported image: {msg}")]
    Unsupported { path: PathBuf, msg: String },
    #[error("{path}: color images are not accepted ({kind})")]
    Color { path: PathBuf, kind: String },
    #[error("{path}: malformed {format}: {msg}")]
    Malformed {
        path: PathBuf,
        format: &'static str,
        msg: String,
    },
    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{path}: {msg}")]
    Dataset { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u16, expected: u16 },
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
}

impl IoError {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::File {
            path: path.into(),
            source,
        }
    }
}
