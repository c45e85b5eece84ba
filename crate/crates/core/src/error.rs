use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("episode already terminated; call reset before stepping")]
    EpisodeTerminated,

    #[error("expected {expected} controls, got {got}")]
    ControlCount { expected: usize, got: usize },

    #[error("control {value} of agent {agent} outside [-{u_max}, {u_max}]")]
    ControlOutOfRange { agent: usize, value: f64, u_max: f64 },

    #[error("agent index {index} out of range for {agents} agents")]
    AgentIndex { index: usize, agents: usize },

    #[error("insufficient experiences: have {have}, need {need}")]
    InsufficientExperiences { have: usize, need: usize },

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("network shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
