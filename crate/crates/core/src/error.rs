use std::fmt;

use thiserror::Error;

use crate::qp::SolveStatus;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Which way the risk-sensitive problem broke down.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreakdownKind {
    /// Risk aversion too large: the adversarial maximization is unbounded.
    Neurotic,
    /// Risk seeking too strong: the cooperative minimization is unbounded.
    Euphoric,
}

impl fmt::Display for BreakdownKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BreakdownKind::Neurotic => write!(f, "neurotic"),
            BreakdownKind::Euphoric => write!(f, "euphoric"),
        }
    }
}

#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("point outside domain at coordinate {coordinate} (value {value}): {detail}")]
    Domain {
        coordinate: usize,
        value: f64,
        detail: String,
    },

    #[error("invalid problem data{}: {message}", period_suffix(*.period))]
    Problem {
        period: Option<usize>,
        message: String,
    },

    #[error("solver returned {status:?}: {context}")]
    Solver {
        status: SolveStatus,
        context: String,
    },

    #[error("{kind} breakdown: {detail}")]
    Breakdown { kind: BreakdownKind, detail: String },

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("policy failed at step {step}: {source}")]
    Policy {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn period_suffix(period: Option<usize>) -> String {
    match period {
        Some(t) => format!(" at t={t}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn problem(period: Option<usize>, message: impl Into<String>) -> Self {
        Error::Problem {
            period,
            message: message.into(),
        }
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::Dimension {
            context: context.into(),
            expected,
            found,
        }
    }

    /// True for breakdown errors, including ones wrapped by a policy step.
    pub fn is_breakdown(&self) -> bool {
        match self {
            Error::Breakdown { .. } => true,
            Error::Policy { source, .. } => source.is_breakdown(),
            _ => false,
        }
    }
}
