use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value in {phase} at node {node} ({op})")]
    NonFinite {
        node: usize,
        op: &'static str,
        phase: &'static str,
    },

    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("loss function is nondeterministic: {first} != {second}")]
    Nondeterministic { first: f64, second: f64 },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("symbol {symbol:?} is not in the inventory of language {language:?}")]
    SymbolNotInLanguage { symbol: String, language: String },

    #[error("unknown {kind} {name:?}")]
    UnknownName { kind: &'static str, name: String },

    #[error("invalid prosody mark: {0}")]
    Prosody(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("id out of range: {0}")]
    OutOfRange(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("statistics error: {0}")]
    Stats(String),

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("refusing to overwrite {0} (use --force)")]
    Exists(PathBuf),

    #[error("no utterances")]
    NoUtterances,

    #[error("empty split {0:?}")]
    EmptySplit(String),

    #[error("training diverged at step {step}: loss_total is not finite")]
    Diverged { step: usize },

    #[error("bad feature file {path}: {msg}")]
    FeatureFile { path: PathBuf, msg: String },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Exists(_) => 2,
            Error::MissingFile(_) => 3,
            _ => 1,
        }
    }
}
