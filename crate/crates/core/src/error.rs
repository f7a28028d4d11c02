use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0}: every dimension must be at least 1")]
    InvalidShape(Shape),

    #[error("data length {len} does not match shape {shape} ({expected} entries)")]
    DataLength {
        shape: Shape,
        expected: usize,
        len: usize,
    },

    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },

    #[error(
        "{size}x{size} window centred at ({y}, {x}) leaves the {height}x{width} map; pad the map first"
    )]
    PatchOutOfBounds {
        y: usize,
        x: usize,
        size: usize,
        height: usize,
        width: usize,
    },

    #[error("{height}x{width} input is smaller than the effective kernel extent {extent}")]
    InputTooSmall {
        height: usize,
        width: usize,
        extent: usize,
    },

    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("layer {layer}: expects {expected} input channels but receives {found}")]
    ChannelChain {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("invalid network: {0}")]
    InvalidSpec(String),

    #[error("layer {layer}: patch size arithmetic overflows")]
    PatchSize { layer: usize },

    #[error("expected a {expected}x{expected} patch, got {found}")]
    PatchSizeMismatch { expected: usize, found: Shape },

    #[error("expected {expected} channels, got {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("invalid error mask: {0}")]
    Mask(String),

    #[error("malformed FMAP data: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
