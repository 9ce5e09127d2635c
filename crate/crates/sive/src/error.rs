use std::path::PathBuf;

/// Errors surfaced by the IO, reference and simulation layers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] sive_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Bad input data or an unsupported request.
    #[error("{0}")]
    Validation(String),

    /// A dense solve failed or a numerical guard tripped.
    #[error("{0}")]
    Numerical(String),

    #[error("dense path limited to n <= {cap}, got n = {n}")]
    CapExceeded { n: usize, cap: usize },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 validation, 3 numerical failure, 4 IO.
    pub fn exit_code(&self) -> i32 {
        use sive_core::Error as E;
        match self {
            Self::Core(E::WeakDenominator { .. } | E::NonPositiveVariance { .. }) => 3,
            Self::Numerical(_) => 3,
            Self::Io { .. } => 4,
            Self::Csv(e) if e.is_io_error() => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
