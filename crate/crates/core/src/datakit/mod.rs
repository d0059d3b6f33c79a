//! On-disk formats, dataset splitting and the synthetic dataset generator.
//!
//! All binary formats are little-endian. Errors name the file and, for
//! binary containers, the byte offset where reading failed.

mod blob;
mod checkpoint;
mod manifest;
mod split;
mod synth;

pub use blob::{Blob, BlobData, BlobFile, BlobWriter, Dtype, BLOB_MAGIC, BLOB_VERSION};
pub use checkpoint::{
    check_layout, decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CheckpointHeader, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use manifest::{
    load_examples, parse_manifest, read_manifest, render_manifest, samples_of, BlobCache, LoadedSplit,
    ManifestRecord, RgbBlobRef, SegBlobRef,
};
pub use split::{split, split_counts};
pub use synth::{
    generate_synthetic, linear_probe_correlation, write_dataset, SyntheticConfig, SyntheticDataset,
    SyntheticSample,
};

use thiserror::Error;

use crate::fusion::FusionError;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path} at offset {offset}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: String,
        offset: u64,
        found: Vec<u8>,
        expected: &'static [u8],
    },
    #[error("{path} at offset {offset}: format version {found}, this build reads {supported}")]
    Version {
        path: String,
        offset: u64,
        found: u16,
        supported: u16,
    },
    #[error("{path} at offset {offset}: unknown or unexpected dtype code {code}")]
    Dtype { path: String, offset: u64, code: u8 },
    #[error("{path} at offset {offset}: shape {found:?}, expected {expected:?}")]
    Shape {
        path: String,
        offset: u64,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{path} at offset {offset}: truncated, need {needed} bytes but {available} remain")]
    Truncated {
        path: String,
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("{path} at offset {offset}: {msg}")]
    Corrupt { path: String, offset: u64, msg: String },
    #[error("{path}: missing tensors: {}", .names.join(", "))]
    MissingTensors { path: String, names: Vec<String> },
    #[error("{path}: {msg}")]
    Layout { path: String, msg: String },
    #[error("{path}: {msg}")]
    Integrity { path: String, msg: String },
    #[error("{path}, line {line}: {msg}")]
    Manifest { path: String, line: usize, msg: String },
    #[error("split: {0}")]
    Split(String),
    #[error("synthetic config: {0}")]
    Synth(String),
    #[error("{path}: {source}")]
    Fusion {
        path: String,
        #[source]
        source: FusionError,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
