use std::path::PathBuf;

/// Errors surfaced by the IO layer, the harness and the CLI.
#[derive(Debug, thiserror::Error)]
pub enum HsdError {
    #[error(transparent)]
    Core(#[from] hsd_core::Error),

    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("malformed csv in {path}: {source}")]
    Csv { path: String, source: csv::Error },

    #[error("invalid json in {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },

    /// Input file content does not fit the expected layout.
    #[error("data error: {0}")]
    Data(String),

    /// The configuration is inconsistent or incomplete.
    #[error("config error: {0}")]
    Config(String),

    #[error("{failed} of {total} repetitions failed (limit 1%); first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
}

pub type Result<T> = std::result::Result<T, HsdError>;

impl HsdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 for invalid configuration or arguments, 3 for bad or unusable data.
    pub fn exit_code(&self) -> i32 {
        match self {
            HsdError::Core(hsd_core::Error::Validation(_))
            | HsdError::Core(hsd_core::Error::StratumExhausted { .. })
            | HsdError::Json { .. }
            | HsdError::Config(_) => 2,
            _ => 3,
        }
    }
}
