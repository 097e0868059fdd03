use thiserror::Error;

pub type Result<T> = std::result::Result<T, XpertError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum XpertError {
    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: String,
        reason: &'static str,
    },

    #[error("index ({row}, {col}) out of range for {rows}x{cols}")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("mask is not binary: entry ({row}, {col}) = {value}")]
    NonBinaryMask { row: usize, col: usize, value: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("layer {layer} has no mask")]
    MissingMask { layer: usize },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("linear solve failed: {0}")]
    Singular(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<XpertError>,
    },
}

impl XpertError {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, found: impl Into<String>) -> Self {
        XpertError::ShapeMismatch {
            op,
            expected: expected.into(),
            found: found.into(),
        }
    }

    pub(crate) fn param(name: &'static str, value: impl ToString, reason: &'static str) -> Self {
        XpertError::InvalidParameter {
            name,
            value: value.to_string(),
            reason,
        }
    }

    /// Wraps the error with a human-readable location such as `epoch 2, layer 1`.
    pub fn context(self, context: impl Into<String>) -> Self {
        XpertError::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error, with all context wrappers stripped.
    pub fn root(&self) -> &XpertError {
        match self {
            XpertError::Context { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures caused by the numbers themselves rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            XpertError::NonFinite { .. }
                | XpertError::Diverged { .. }
                | XpertError::Singular(_)
                | XpertError::Degenerate(_)
        )
    }

    /// Short stable identifier used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            XpertError::ShapeMismatch { .. } => "shape_mismatch",
            XpertError::NonFinite { .. } => "non_finite",
            XpertError::InvalidParameter { .. } => "invalid_parameter",
            XpertError::IndexOutOfRange { .. } => "index_out_of_range",
            XpertError::NonBinaryMask { .. } => "non_binary_mask",
            XpertError::Degenerate(_) => "degenerate",
            XpertError::InvalidModel(_) => "invalid_model",
            XpertError::MissingMask { .. } => "missing_mask",
            XpertError::Diverged { .. } => "diverged",
            XpertError::Singular(_) => "singular",
            XpertError::Context { .. } => unreachable!("root() strips context"),
        }
    }
}
