use alloc::string::String;

/// Errors raised by the estimation and analysis routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("column {column} is constant and cannot be standardized")]
    ConstantColumn { column: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("clever covariate is identically zero")]
    DegenerateCovariate,

    #[error("propensity {value} at row {row} lies on the boundary of (0, 1)")]
    PropensityOnBoundary { row: usize, value: f64 },

    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },

    #[error("the {0} group is empty")]
    EmptyGroup(&'static str),

    #[error("probe target is constant on the evaluation split")]
    ConstantTarget,

    #[error("all importance weights are zero")]
    ZeroImportance,

    #[error("factor grid is empty")]
    EmptyGrid,
}

pub type Result<T> = core::result::Result<T, Error>;
