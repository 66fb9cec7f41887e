//! Checkpoint containers and trajectory manifests.

mod container;
mod manifest;

pub use container::{
    layout_records, read_header, write_container, Container, ContainerHeader, ContainerWriter,
    DType, Tensor, TensorReader, TensorRecord, TensorValues, METADATA_KEY,
};
pub use manifest::{ManifestEntry, TrajectoryManifest, MANIFEST_FILE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no tensors")]
    NoTensors,
    #[error("tensor name must be non-empty")]
    EmptyName,
    #[error("tensor name {0:?} is reserved")]
    ReservedName(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {name:?}: shape needs {expected} elements, got {actual}")]
    ShapeMismatch { name: String, expected: usize, actual: usize },
    #[error("tensor {0:?}: element count overflows")]
    ShapeOverflow(String),
    #[error("tensor {0:?}: dtype does not match the declared layout")]
    DtypeMismatch(String),
    #[error("unknown dtype {0:?}")]
    UnknownDtype(String),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("header is not in canonical form")]
    NonCanonical,
    #[error("invalid metadata: {0}")]
    Metadata(String),
    #[error("{0}")]
    Truncated(String),
    #[error("overlapping tensors {0:?} and {1:?}")]
    Overlap(String, String),
    #[error("gap in data section at byte {at} before tensor {before:?}")]
    Gap { before: String, at: u64 },
    #[error("{0} trailing bytes after data section")]
    TrailingData(u64),
    #[error("unknown tensor {0:?}")]
    UnknownTensor(String),
    #[error("tensor {0:?}: payload length mismatch")]
    PayloadLength(String),
    #[error("write order: {0}")]
    WriteOrder(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("cannot open {0}: {1}")]
    Open(String, #[source] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
