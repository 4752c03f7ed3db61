use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("row {row}, column {column:?}: cannot parse {value:?} as a finite number")]
    BadCell { row: usize, column: String, value: String },

    #[error("role constraint violated: {0}")]
    Roles(String),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("index {index} out of range ({valid})")]
    OutOfRange { index: usize, valid: String },

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("graph contains a cycle through {0:?}")]
    Cyclic(Vec<String>),

    #[error("only {available} admissible edges remain, {requested} requested")]
    NotEnoughEdges { available: usize, requested: usize },

    #[error("degenerate independence test: {0}")]
    Degenerate(String),

    #[error("not enough samples: {0}")]
    InsufficientSamples(String),

    #[error("rank-deficient regression for {0}")]
    RankDeficient(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("thread pool: {0}")]
    ThreadPool(#[from] rayon::ThreadPoolBuildError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
