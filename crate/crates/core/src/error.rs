use std::path::PathBuf;

/// Every failure the toolkit can report.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("matrix is not positive definite: factorization failed at pivot {pivot}")]
    Singular { pivot: usize },

    #[error("class {class} has no examples")]
    MissingClass { class: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid label {label} (num_classes = {num_classes})")]
    Label { label: usize, num_classes: usize },

    #[error("numeric divergence in parameter tensor `{param}`")]
    Divergence { param: String },

    #[error("trace does not match network: {0}")]
    Consistency(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("detector state error: {0}")]
    State(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("corrupted file {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("split error: {0}")]
    Split(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("channel error: expected 3 channels, got {0}")]
    Channel(usize),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("datasets `{a}` and `{b}` are not disjoint: image {a}[{index_a}] equals {b}[{index_b}]")]
    NotDisjoint {
        a: String,
        b: String,
        index_a: usize,
        index_b: usize,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
