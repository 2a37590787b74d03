use std::path::PathBuf;

/// Errors raised anywhere in the training pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("unknown {kind} id {id}")]
    Lookup { kind: &'static str, id: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("split contamination: {0}")]
    SplitContamination(String),

    #[error("missing artifact {path}: run the `{stage}` stage first")]
    MissingArtifact { stage: String, path: PathBuf },

    #[error("refusing to resume: {0}")]
    ResumeMismatch(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Toml(_) | Error::ResumeMismatch(_) => 2,
            Error::MissingArtifact { .. } => 3,
            Error::Numeric(_) => 4,
            _ => 1,
        }
    }
}
