use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("state error: {0}")]
    State(String),
    #[error("range error: {0}")]
    Range(String),
    #[error("non-finite value produced by `{op}`")]
    Numerics { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate key: projected norm {norm:e} is below 1e-12")]
    DegenerateKey { norm: f64 },
    #[error("build error: {0}")]
    Build(String),
    #[error("memory has no live entries")]
    EmptyMemory,
    #[error("unknown id {0}")]
    UnknownId(u64),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("sample {0} has no live memory entry")]
    StaleSample(u64),
    #[error("degenerate features: {0}")]
    DegenerateFeatures(String),
    #[error("no candidate survived selection")]
    NoViableCandidate,
    #[error("format error: {0}")]
    Format(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
