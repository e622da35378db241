use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("degenerate quantization range for {0} (min = max = 0); tensor is uncalibrated")]
    DegenerateRange(String),

    #[error("invalid quantization parameters: {0}")]
    InvalidQuantParams(String),

    #[error("channel mismatch in {op}: expected {expected}, got {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("spatial mismatch in {op}: {detail}")]
    SpatialMismatch { op: &'static str, detail: String },

    #[error("accumulator may overflow 32 bits in {0}")]
    AccumulatorOverflow(String),

    #[error("shape contradiction at {node}: {detail}")]
    ShapeContradiction { node: String, detail: String },

    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("weight archive: missing tensor {0}")]
    MissingTensor(String),

    #[error("weight archive: unexpected tensor {0}")]
    UnexpectedTensor(String),

    #[error("weight archive: shape mismatch for {name}: expected {expected:?}, got {actual:?}")]
    TensorShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("weight archive: dtype mismatch for {name}: expected {expected}, got {actual}")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        actual: &'static str,
    },

    #[error("weight archive: corrupt header: {0}")]
    CorruptArchive(String),

    #[error("unplannable layer {layer}: {detail}")]
    Unplannable { layer: String, detail: String },

    #[error("calibration target unreachable: {0}")]
    CalibrationUnreachable(String),

    #[error("hardware config line {line}: {detail}")]
    HardwareConfig { line: usize, detail: String },

    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
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
