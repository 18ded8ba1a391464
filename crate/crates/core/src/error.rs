use std::path::PathBuf;

use dmcvr_nn::ArchiveError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// Shapes or argument relations violate an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("singular coefficient: {0}")]
    Singularity(String),
    /// A model is used before it has been trained or loaded.
    #[error("model state: {0}")]
    State(String),
    #[error("degenerate interpolation pair: {0}")]
    DegeneratePair(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("configuration error: {0}")]
    Config(String),
    /// A pipeline stage was run before the stage that produces its input.
    #[error("stage `{stage}` requires `{missing}`; run `{producer}` first")]
    StageOrder {
        stage: String,
        missing: PathBuf,
        producer: String,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("slice {index}: {source}")]
    AtSlice {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at_slice(self, index: usize) -> Self {
        Error::AtSlice {
            index,
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) => 2,
            Error::StageOrder { .. } => 3,
            Error::Numeric(_) | Error::Singularity(_) => 4,
            Error::AtSlice { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}
