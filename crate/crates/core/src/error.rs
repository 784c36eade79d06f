use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("object id {id} out of range [0, {n_objects}]")]
    InvalidId { id: u32, n_objects: u32 },

    #[error("invalid rotation: quaternion norm {norm} is not 1")]
    InvalidRotation { norm: f64 },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("initialization error: {0}")]
    Init(String),

    #[error("degenerate view: camera coincides with anchor at {0:?}")]
    DegenerateView([f64; 3]),

    #[error("non-finite {component} loss ({value})")]
    NonFinite { component: &'static str, value: f64 },

    #[error("training diverged at iteration {iteration}: {source}")]
    Diverged {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },

    #[error("unknown object {query}; available ids: {available:?}")]
    Lookup { query: String, available: Vec<u32> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
