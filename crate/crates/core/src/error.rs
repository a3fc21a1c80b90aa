use thiserror::Error;

/// Which solvability gate rejected a rank choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    /// Strict separation between the k-th and (k+1)-th singular value of the
    /// projected data matrix.
    SingularValueGap,
    /// Full row rank of the bottom-right block of the null-space basis.
    TrailingBlockRank,
}

impl std::fmt::Display for Gate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Gate::SingularValueGap => f.write_str("singular-value gap"),
            Gate::TrailingBlockRank => f.write_str("trailing-block rank"),
        }
    }
}

#[derive(Debug, Error)]
pub enum TlseError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("constraint matrix rank-deficient: smallest singular value {sigma_min:.3e} <= threshold {threshold:.3e}")]
    RankDeficientConstraint { sigma_min: f64, threshold: f64 },

    #[error("data block not overdetermined: {0}")]
    NotOverdetermined(String),

    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{gate} gate failed at k = {k}: {detail}")]
    GateFailure { gate: Gate, k: usize, detail: String },

    #[error("unsolvable instance: no admissible k in [0, {max_k}] ({last})")]
    Unsolvable { max_k: usize, last: Box<TlseError> },

    #[error("genericity condition violated: {0}")]
    Genericity(String),

    #[error("explicit assembly needs {entries} entries, above the cap of {cap}; use the matrix-free path")]
    SizeCap { entries: usize, cap: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("undefined quantity: {0}")]
    Undefined(String),
}

impl TlseError {
    /// True for errors that describe an instance outside the solvable class,
    /// as opposed to usage mistakes or numerical breakdown.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            TlseError::RankDeficientConstraint { .. }
                | TlseError::NotOverdetermined(_)
                | TlseError::GateFailure { .. }
                | TlseError::Unsolvable { .. }
                | TlseError::Genericity(_)
                | TlseError::Undefined(_)
        )
    }

    /// The gate that rejected the instance, if any.
    pub fn gate(&self) -> Option<Gate> {
        match self {
            TlseError::GateFailure { gate, .. } => Some(*gate),
            TlseError::Unsolvable { last, .. } => last.gate(),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, TlseError>;
