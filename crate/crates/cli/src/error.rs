use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] latent_scope::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifact {path}; run `latent-scope {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error("{path} was produced under a different configuration (hash {found}, expected {expected}); rerun `latent-scope {producer}`")]
    HashMismatch {
        path: PathBuf,
        found: String,
        expected: String,
        producer: &'static str,
    },
    #[error("output directory {0} is not empty; pass --force to overwrite")]
    NotEmpty(PathBuf),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
