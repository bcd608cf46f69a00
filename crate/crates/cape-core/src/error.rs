use thiserror::Error;

/// Errors produced anywhere in the model/data substrate.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in `{primitive}`: {detail}")]
    ShapeMismatch {
        primitive: &'static str,
        detail: String,
    },

    #[error("softmax row {row} is fully masked")]
    DegenerateRow { row: usize },

    #[error("value does not belong to this tape")]
    ForeignTape,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("annotation parse error: {0}")]
    Parse(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("irreconcilable keypoint index base: {0}")]
    IndexBase(String),

    #[error("degenerate mask: keypoint {0} has zero total mass")]
    DegenerateMask(usize),

    #[error("undefined: no valid keypoints")]
    NoValidKeypoints,

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn contract(msg: impl Into<String>) -> Self {
        CoreError::Contract(msg.into())
    }
}
