use std::path::PathBuf;

use thiserror::Error;

use crate::llm::Stage;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    /// A learning or repair loop used up every attempt.
    #[error("stage {stage} exhausted after {attempts} attempts{}: {last_message}", sample_suffix(.sample_index))]
    StageExhausted {
        stage: Stage,
        attempts: u32,
        sample_index: Option<usize>,
        last_message: String,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("query parse error at position {position}: {message}")]
    QueryParse { position: usize, message: String },

    #[error("stage order violated: {0}")]
    StageOrder(String),

    #[error("{0}")]
    Eval(String),
}

fn sample_suffix(index: &Option<usize>) -> String {
    match index {
        Some(i) => format!(" on sample {i}"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by the caller (bad config, bad arguments) rather
    /// than by a pipeline stage.
    pub fn is_user_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Input(_))
    }
}
