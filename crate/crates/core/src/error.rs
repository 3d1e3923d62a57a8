use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    Shape { op: &'static str, left_rows: usize, left_cols: usize, right_rows: usize, right_cols: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("input too short: need at least {needed} samples, got {got}")]
    Length { needed: usize, got: usize },

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),

    #[error("{source_name}:{line}: {msg}")]
    Parse { source_name: String, line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        Error::Shape { op, left_rows: left.0, left_cols: left.1, right_rows: right.0, right_cols: right.1 }
    }
}
