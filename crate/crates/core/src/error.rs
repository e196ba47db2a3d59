use thiserror::Error;

/// Errors produced anywhere in the pipeline.
///
/// The `Display` text of each variant starts with the variant name so that
/// command-line callers can surface a stable, greppable tag.
#[derive(Debug, Error)]
pub enum Error {
    #[error("NotPositiveDefinite: pivot {pivot} at row {row} is not positive")]
    NotPositiveDefinite { row: usize, pivot: f64 },

    #[error("IndexOutOfRange: index {index} is not below {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),

    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),

    #[error("InvalidSpec: {0}")]
    InvalidSpec(String),

    #[error("InsufficientData: {0}")]
    InsufficientData(String),

    #[error("EmptyTrainSplit: the corpus has no training frames")]
    EmptyTrainSplit,

    #[error("DivergenceDetected: non-finite objective at epoch {epoch}, step {step}")]
    DivergenceDetected { epoch: usize, step: usize },

    #[error("NonPositiveF0: voiced frame {frame} has f0 {value}")]
    NonPositiveF0 { frame: usize, value: f64 },

    #[error("WrongModelKind: {0}")]
    WrongModelKind(String),

    #[error("Format: {0}")]
    Format(String),

    #[error("Io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("Json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// True for errors caused by a bad configuration, spec or input files
    /// rather than by numerics.
    pub fn is_usage(&self) -> bool {
        !matches!(
            self,
            Error::DivergenceDetected { .. } | Error::NotPositiveDefinite { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
