use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter shapes that cannot be combined.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Input image dimensions the backbone stride arithmetic cannot handle.
    #[error("image of {height}x{width} is not divisible by {multiple}")]
    Sizing { height: usize, width: usize, multiple: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// An embedding whose pre-normalization vector is zero has no direction.
    #[error("descriptor has zero norm")]
    ZeroDescriptor,

    #[error("box lies outside the image: {0}")]
    BoxOutsideImage(String),

    #[error("gallery index was built with embedder {index} but current weights are {current}")]
    StaleGallery { index: String, current: String },

    #[error("corrupt {what}: {reason}")]
    Corrupt { what: &'static str, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("weights archive: {0}")]
    Archive(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
