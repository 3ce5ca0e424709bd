use thiserror::Error;

#[derive(Debug, Error)]
pub enum MadlError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{file}: parse error at row {row}, column {column}: {message}")]
    Parse {
        file: String,
        row: usize,
        column: usize,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MadlError>;

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> MadlError {
    MadlError::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}
