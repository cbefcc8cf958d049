use std::path::PathBuf;

use crate::gateway::Purpose;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("story text is empty or contains no tokens")]
    EmptyStory,

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("story `{story}` is labeled {found:?}, corpus orientation is {expected}")]
    Label {
        story: String,
        expected: String,
        found: Option<String>,
    },

    #[error("malformed logic program: {0}")]
    Program(String),

    #[error("story `{0}` has no chunks")]
    DegenerateStory(String),

    #[error("rating {0} is outside 1..=5")]
    Rating(i64),

    #[error("observations incomplete: {0}")]
    Observation(String),

    #[error("cannot learn rules: {0}")]
    Learn(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("no improvable chunk-feature pair: story already expresses the target orientation")]
    EmptyExplanation,

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("transform failed: {0}")]
    Transform(String),

    #[error("rewrite rejected: {0}")]
    RejectedRewrite(String),

    #[error("lookup failed: {0}")]
    Lookup(String),

    #[error("{purpose} request failed: {cause}")]
    Gateway { purpose: Purpose, cause: String },

    #[error("authentication rejected by provider: {0}")]
    Auth(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
