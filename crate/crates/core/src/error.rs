use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("non-finite parameter in layer `{0}`")]
    NonFinite(String),

    #[error("value {value} outside representable range [{lo}, {hi}]")]
    OutOfRange { value: i64, lo: i64, hi: i64 },

    #[error("batch norm `{0}` is not directly preceded by a convolution")]
    BatchNormNotAfterConv(String),

    #[error("layer pair `{0}` -> `{1}` is separated by a non-ReLU nonlinearity")]
    NotReluPair(String, String),

    #[error("missing batch-norm statistics for `{0}`")]
    MissingBnStats(String),

    #[error("missing quantization parameters for `{0}`")]
    MissingQParams(String),

    #[error("bias of `{0}` overflows its integer range")]
    BiasOverflow(String),

    #[error("accumulator headroom exceeded in `{layer}`: worst case {bound}")]
    AccumulatorHeadroom { layer: String, bound: i64 },

    #[error("requantization shift {shift} of `{layer}` outside [-31, 31]")]
    ShiftRange { layer: String, shift: i32 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: u8, classes: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("checksum mismatch: expected {expected:08x}, found {found:08x}")]
    Checksum { expected: u32, found: u32 },

    #[error(transparent)]
    Io(#[from] io::Error),
}
