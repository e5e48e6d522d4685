use std::path::PathBuf;

use anomaly_recon_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("refusing to write into non-empty {}; pass --force to replace it", .0.display())]
    NotEmpty(PathBuf),

    #[error("{} is locked by another run; delete the lock file if that run is gone", .0.display())]
    Locked(PathBuf),

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::NotEmpty(_) => 2,
            CliError::Locked(_) => 1,
            CliError::Core(e) => match e {
                CoreError::InvalidArgument(_) | CoreError::Config(_) => 2,
                CoreError::MissingArtifact(_) | CoreError::UntrainedModel(_) => 3,
                CoreError::NumericFailure(_) | CoreError::DegenerateInput(_) => 4,
                CoreError::Io { .. } | CoreError::Json(_) => 1,
            },
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |e| CliError::Core(CoreError::io(path, e))
}

pub(crate) fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
