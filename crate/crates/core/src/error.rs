use std::path::PathBuf;

/// Errors produced by the deblurring pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite values in {stage}")]
    NonFinite { stage: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("missing parameter group `{0}`")]
    MissingGroup(String),

    #[error("frozen parameters of `{0}` changed during training")]
    FrozenChanged(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn non_finite(stage: impl Into<String>) -> Self {
        Error::NonFinite {
            stage: stage.into(),
        }
    }

    /// Process exit code for the command-line surface: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Json(_)
            | Error::Checkpoint(_)
            | Error::CheckpointVersion { .. }
            | Error::MissingGroup(_) => 3,
            Error::NonFinite { .. }
            | Error::Numerical(_)
            | Error::FrozenChanged(_)
            | Error::Tensor(_)
            | Error::Shape(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
