use std::path::{Path, PathBuf};

/// Failures surfaced by the command-line tool. Each maps to a stable
/// category string and exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] tempmix::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// Machine-readable category printed as `error[<category>]`.
    pub fn category(&self) -> &'static str {
        use tempmix::Error as E;
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } | CliError::Csv(_) | CliError::Core(E::Io { .. }) => "io",
            CliError::Core(e) => match e {
                E::Schema(_) | E::Row { .. } | E::Csv(_) | E::Raster(_) | E::Folds(_) | E::OutOfBounds { .. } | E::NoData { .. } => "data",
                E::Checkpoint(_) => "checkpoint",
                E::TrainingAborted { .. } | E::NonFinite(_) => "training",
                _ => "invalid-input",
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" => 2,
            "config" => 3,
            "io" => 4,
            "data" => 5,
            "checkpoint" => 6,
            "training" => 7,
            _ => 8,
        }
    }
}
