use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("image is constant; no threshold separates two classes")]
    ConstantImage,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("image too small: {height}x{width}, need at least {min} on each side")]
    ImageTooSmall { height: usize, width: usize, min: usize },

    #[error("canvas of {canvas}px is too small for a {margin}px margin")]
    CanvasTooSmall { canvas: usize, margin: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported image {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset error: {0}")]
    Dataset(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
