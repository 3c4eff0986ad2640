use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("backward() needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("could not place {wanted} non-overlapping boxes for seed {seed}")]
    Placement { seed: u64, wanted: usize },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("grid is empty")]
    EmptyGrid,

    #[error("teacher/student mismatch: {0}")]
    ModelMismatch(String),

    #[error("non-finite loss at step {step}")]
    DivergedAt { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

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

    /// True for errors a CLI should report as configuration problems.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::ModelMismatch(_) | Error::Parse { .. }
        )
    }

    /// True for errors that stem from numerical failure during training.
    pub fn is_numeric_error(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DivergedAt { .. })
    }
}
