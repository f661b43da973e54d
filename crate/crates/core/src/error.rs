use thiserror::Error;

/// Errors raised by the numeric core, the evaluation kit and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// A layer cannot consume the shape it is handed.
    #[error("shape mismatch at layer {layer_index}: expected {expected}, got {got:?}")]
    ShapeMismatch {
        layer_index: usize,
        expected: String,
        got: Vec<usize>,
    },

    /// Shape error outside of a network (raw rule calls, maps, grids).
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced at layer {layer_index}")]
    NonFiniteValue { layer_index: usize },

    #[error("batch-norm layer {layer_index} is not preceded by a convolution")]
    CannotFold { layer_index: usize },

    /// LRP requires batch-norm to be folded into the preceding convolution.
    #[error("network is not canonized: batch-norm remains at layer {layer_index}")]
    NotCanonized { layer_index: usize },

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("grid is empty")]
    EmptyGrid,

    #[error("keypoint for part {part_id} is not visible")]
    NotVisible { part_id: usize },

    #[error("keypoint ({x}, {y}) outside {height}x{width} grid")]
    OutOfBounds {
        x: usize,
        y: usize,
        height: usize,
        width: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected \"CBX1\", found {0:?}")]
    BadMagic(String),

    #[error("corrupt offsets: {0}")]
    CorruptOffsets(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(layer_index: usize, expected: impl Into<String>, got: &[usize]) -> Self {
        Error::ShapeMismatch {
            layer_index,
            expected: expected.into(),
            got: got.to_vec(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
