use thiserror::Error;

/// Errors produced by the hmatern library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty point set")]
    EmptyPointSet,
    #[error("non-finite coordinate at point {index}")]
    NonFiniteCoordinate { index: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dense cap exceeded: n = {n} > cap = {cap}")]
    DenseCapExceeded { n: usize, cap: usize },
    #[error("matrix not positive definite at diagonal position {position}")]
    NotPositiveDefinite { position: usize },
    #[error("rank cap {cap} exhausted while compressing a {rows}x{cols} block")]
    RankCapExhausted { cap: usize, rows: usize, cols: usize },
    #[error("numeric overflow in {0}")]
    Overflow(String),
    #[error("csv parse error at line {line}: {message}")]
    CsvParse { line: usize, message: String },
    #[error("unsupported format: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
