use thiserror::Error;

pub type Result<T, E = DoraError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoraError {
    #[error("{op}: shape mismatch, expected {expected}, got {found}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("chunk budget of {budget_bytes} bytes cannot hold a {min_width}-column fp32 chunk at d_out={d_out}")]
    BudgetTooSmall {
        budget_bytes: u64,
        d_out: usize,
        min_width: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{op}: d_in={d_in} exceeds the dense-oracle cap of {cap}")]
    OracleCapExceeded {
        op: &'static str,
        d_in: usize,
        cap: usize,
    },

    #[error("missing saved tensor `{0}`")]
    MissingSaved(&'static str),

    #[error("{0}")]
    Parse(String),
}

impl DoraError {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        DoraError::ShapeMismatch {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
