use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite input element at flat index {index}")]
    NumericInput { op: &'static str, index: usize },

    #[error("{op}: degenerate input: {detail}")]
    DegenerateInput { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },

    #[error("dangling reference: node `{node}` refers to unknown `{target}`")]
    DanglingReference { node: String, target: String },

    #[error("unknown backend preset `{0}`")]
    UnknownPreset(String),

    #[error("graph policy mismatch: {0}")]
    PolicyMismatch(String),

    #[error("graph already contains fake-quantize nodes")]
    AlreadyQuantized,

    #[error("calibration required for: {}", .0.join(", "))]
    CalibrationRequired(Vec<String>),

    #[error("observer `{0}` has no observations")]
    EmptyObserver(String),

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("batch norm `{0}` is not folded")]
    UnfoldedBatchNorm(String),

    #[error("batch norm `{0}` does not directly follow a conv2d/linear node")]
    BatchNormWithoutConv(String),

    #[error("INT32 overflow in node `{0}`")]
    Overflow(String),

    #[error("graphs are not comparable: {0}")]
    TopologyMismatch(String),

    #[error("loss passed to backward is not a scalar (shape {0:?})")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is not recorded on this tape")]
    NotOnTape,

    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("threshold violated: {0}")]
    Threshold(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::MissingInput(_) => 2,
            Error::EmptyDataset | Error::EmptyObserver(_) => 3,
            Error::CalibrationRequired(_) => 4,
            Error::NumericInput { .. }
            | Error::DegenerateInput { .. }
            | Error::Overflow(_)
            | Error::Divergence { .. } => 5,
            Error::Threshold(_) => 6,
            _ => 1,
        }
    }
}
