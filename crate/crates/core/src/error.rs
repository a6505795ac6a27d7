use thiserror::Error;

/// Errors produced by the dispatch pipeline, schedule builder, perf model and
/// skew harness.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoeError {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("top_k={k} out of range for {num_experts} experts")]
    InvalidK { k: usize, num_experts: usize },
    #[error("expert index {index} out of range for {num_experts} experts")]
    IndexOutOfRange { index: usize, num_experts: usize },
    #[error("block_m must be >= 1")]
    InvalidBlockM,
    #[error("invalid tile parameters: {0}")]
    InvalidParams(String),
    #[error("block schedule does not match expert offsets: {0}")]
    ScheduleMismatch(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("hardware preset {0} has no published peak FLOP/s; supply one")]
    MissingPeakFlops(&'static str),
    #[error("invalid hardware profile: {0}")]
    InvalidHardware(String),
    #[error("stage has neither FLOPs nor bytes")]
    DegenerateStage,
    #[error("expert histogram is all zero")]
    AllZero,
    #[error("invalid skew spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T, E = MoeError> = std::result::Result<T, E>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl std::fmt::Display,
    actual: impl std::fmt::Display,
) -> MoeError {
    MoeError::ShapeMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
