use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("no windows: no document is long enough for k + l = {0}")]
    NoWindows(usize),
    #[error("empty table: every count was filtered away")]
    EmptyTable,
    #[error("token id {token} out of range for alphabet of size {alphabet}")]
    TokenOutOfRange { token: u32, alphabet: usize },
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range (len {len})")]
    OutOfRange { index: usize, len: usize },
    #[error("inconsistent alphabet sizes: {0} vs {1}")]
    AlphabetMismatch(usize, usize),
    #[error("zero-probability context {0:?}")]
    ZeroMarginal(Vec<u32>),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("decomposition is truncated; operation requires the full decomposition")]
    IncompleteDecomposition,
    #[error("column for context {0:?} clips to all zeros")]
    EmptyColumn(Vec<u32>),
    #[error("possibly-empty feasible set: {0}")]
    Infeasible(String),
    #[error("hyperparameter window violated: M*n*beta = {mnb} not in ({lower}, {upper})")]
    WindowViolation { mnb: f64, lower: f64, upper: f64 },
    #[error("chain diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
