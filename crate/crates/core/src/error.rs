use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = UwsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum UwsError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("invalid {what}: {message}")]
    Invalid { what: String, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("dimension mismatch{}: {message}", utterance.as_ref().map(|u| format!(" in utterance {u}")).unwrap_or_default())]
    Dimension {
        utterance: Option<String>,
        message: String,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("stage {stage} failed{}: {message}", utterance.as_ref().map(|u| format!(" on utterance {u}")).unwrap_or_default())]
    Stage {
        stage: String,
        utterance: Option<String>,
        message: String,
    },

    #[error("utterance {utterance}: {source}")]
    Utterance {
        utterance: String,
        #[source]
        source: Box<UwsError>,
    },

    #[error("config error: {0}")]
    Config(String),
}

impl UwsError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UwsError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        UwsError::Invalid {
            what: what.into(),
            message: message.into(),
        }
    }

    pub fn parse(context: impl Into<String>, message: impl Into<String>) -> Self {
        UwsError::Parse {
            context: context.into(),
            message: message.into(),
        }
    }

    pub fn dim(utterance: Option<&str>, message: impl Into<String>) -> Self {
        UwsError::Dimension {
            utterance: utterance.map(str::to_owned),
            message: message.into(),
        }
    }

    /// Tags an error with the utterance it concerns.
    pub fn in_utterance(id: &str, err: UwsError) -> Self {
        match err {
            UwsError::Stage {
                utterance: Some(_), ..
            }
            | UwsError::Utterance { .. } => err,
            other => UwsError::Utterance {
                utterance: id.to_owned(),
                source: Box::new(other),
            },
        }
    }

    pub fn stage(stage: &str, err: UwsError) -> Self {
        match err {
            UwsError::Stage { .. } => err,
            UwsError::Utterance { utterance, source } => UwsError::Stage {
                stage: stage.to_owned(),
                utterance: Some(utterance),
                message: source.to_string(),
            },
            other => {
                let utterance = match &other {
                    UwsError::Dimension { utterance, .. } => utterance.clone(),
                    _ => None,
                };
                UwsError::Stage {
                    stage: stage.to_owned(),
                    utterance,
                    message: other.to_string(),
                }
            }
        }
    }
}
