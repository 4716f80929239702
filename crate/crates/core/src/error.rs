use thiserror::Error;

pub type Result<T> = std::result::Result<T, MtdsError>;

#[derive(Debug, Error)]
pub enum MtdsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("covariance is not positive definite ({context})")]
    NotPositiveDefinite { context: String },

    #[error("non-finite objective at iteration {iter} for sequence {seq_id}")]
    NonFiniteObjective { iter: usize, seq_id: String },

    #[error("target has no support under proposal")]
    NoSupport,

    #[error("at t = {t}: {source}")]
    AtTime {
        t: usize,
        #[source]
        source: Box<MtdsError>,
    },

    #[error("fold {fold}: {source}")]
    InFold {
        fold: usize,
        #[source]
        source: Box<MtdsError>,
    },

    #[error("innovation covariance not positive definite at t = {t}")]
    Innovation { t: usize },

    #[error("Riccati iteration did not converge after {iters} iterations (residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MtdsError {
    pub fn dim(what: &'static str, expected: usize, actual: usize) -> Self {
        MtdsError::Dimension { what, expected, actual }
    }

    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        MtdsError::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, msg: impl Into<String>) -> Self {
        MtdsError::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn at_time(self, t: usize) -> Self {
        MtdsError::AtTime {
            t,
            source: Box::new(self),
        }
    }

    pub fn in_fold(self, fold: usize) -> Self {
        MtdsError::InFold {
            fold,
            source: Box::new(self),
        }
    }

    /// True for failures of the numerical routines (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        match self {
            MtdsError::NotPositiveDefinite { .. }
            | MtdsError::NonFiniteObjective { .. }
            | MtdsError::NoSupport
            | MtdsError::Innovation { .. }
            | MtdsError::NoConvergence { .. } => true,
            MtdsError::AtTime { source, .. } | MtdsError::InFold { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
