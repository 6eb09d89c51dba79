use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("config hash {config} does not match checkpoint {checkpoint}")]
    HashMismatch { config: String, checkpoint: String },
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] topicvae::corpus::CorpusError),
    #[error(transparent)]
    Model(#[from] topicvae::models::ModelError),
    #[error(transparent)]
    Train(#[from] topicvae::training::TrainError),
    #[error(transparent)]
    Eval(#[from] topicvae::evaluation::EvalError),
}

impl CliError {
    /// 2 for problems with the invocation or config, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::UnknownKey(_) | CliError::Config(_) | CliError::Usage(_) | CliError::HashMismatch { .. } => 2,
            CliError::Model(topicvae::models::ModelError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
