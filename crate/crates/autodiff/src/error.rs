use thiserror::Error;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;

fn fmt_shape(s: &(usize, usize)) -> String {
    format!("{}×{}", s.0, s.1)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {} and {}", fmt_shape(.lhs), fmt_shape(.rhs))]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a 1×1 root, got {}", fmt_shape(.0))]
    NonScalarRoot((usize, usize)),
    #[error("tensor dimensions must be positive, got {rows}×{cols}")]
    EmptyShape { rows: usize, cols: usize },
    #[error("data length {len} does not match shape {}", fmt_shape(.shape))]
    DataLength { shape: (usize, usize), len: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("softmax: every position along the axis is masked")]
    AllMasked,
}

impl AutodiffError {
    pub fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Self::ShapeMismatch { op, lhs, rhs }
    }

    pub fn invalid(op: &'static str, reason: impl Into<String>) -> Self {
        Self::InvalidArgument {
            op,
            reason: reason.into(),
        }
    }
}
