use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the retrieval stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: I/O error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed record at line {line_no}: {reason}")]
    MalformedRecord { line_no: usize, reason: String },
    #[error("duplicate document key {0:?}")]
    DuplicateKey(String),
    #[error("vocabulary is frozen and does not contain {0:?}")]
    VocabularyFrozen(String),

    #[error("document {0:?} has no embeddable text")]
    EmptyDocument(String),
    #[error("degenerate clustering input: {0}")]
    DegenerateInput(String),
    #[error("unknown document {0:?}")]
    UnknownDoc(String),

    #[error("operation not supported by model {0}")]
    NotSupported(String),
    #[error("token id {0} is outside the vocabulary")]
    UnknownToken(u32),
    #[error("target sequence does not end with END")]
    MissingEnd,
    #[error("remote model unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("remote model timed out: {0}")]
    Timeout(String),
    #[error("model failure: {0}")]
    ModelFailure(String),

    #[error("cannot build a constraint automaton over an empty index")]
    EmptyIndex,
    #[error("invalid automaton state: {0}")]
    InvalidState(String),
    #[error("token {0} is not allowed in this state")]
    IllegalTransition(u32),
    #[error("state is not terminal")]
    NotTerminal,

    #[error("no valid docid path from the start state")]
    NoValidPath,
    #[error("query text is empty")]
    EmptyQuery,
    #[error("no runs to evaluate")]
    EmptyRuns,

    #[error("template slot {{{0}}} is unbound")]
    UnboundSlot(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
