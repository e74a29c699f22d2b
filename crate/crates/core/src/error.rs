use thiserror::Error;

/// Errors surfaced by the protocol and mechanism layers.
#[derive(Error, Debug)]
pub enum CapeError {
    #[error("invalid privacy parameter: {0}")]
    InvalidParameter(String),

    #[error("collusion bound violated: S_C = {s_c} exceeds ceil(S/3) - 1 = {max_s_c} for S = {s}")]
    CollusionBound { s: usize, s_c: usize, max_s_c: usize },

    #[error("calibration infeasible: epsilon = {epsilon} must exceed mu_z = {mu_z}")]
    CalibrationInfeasible { epsilon: f64, mu_z: f64 },

    #[error("value {value} outside quantization range +-{clip_bound}")]
    QuantizationRange { value: f64, clip_bound: f64 },

    #[error("{got} shares provided, threshold requires {needed}")]
    InsufficientShares { got: usize, needed: usize },

    #[error("{active} active sites below dropout threshold t = {threshold}")]
    DropoutThreshold { active: usize, threshold: usize },

    #[error("empty dataset: {0}")]
    EmptyData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("input bound violated: {0}")]
    BoundViolation(String),

    #[error("gradient descent diverged: loss increased for {0} consecutive iterations")]
    Divergence(usize),
}

pub type Result<T> = std::result::Result<T, CapeError>;
