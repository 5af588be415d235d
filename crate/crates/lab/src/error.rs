use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// A configuration value failed to parse or validate. `key` is the dotted
    /// path of the offending entry.
    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what}: {message}")]
    Format { what: &'static str, message: String },
    #[error(transparent)]
    Core(#[from] fedsis_core::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn format(what: &'static str, message: impl Into<String>) -> Self {
        LabError::Format {
            what,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| LabError::Io { path, source }
    }
}
