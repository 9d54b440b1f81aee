use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or arguments that violate an operation's precondition.
    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    /// A forward pass produced NaN or infinity.
    #[error("numeric fault: non-finite output from {op}")]
    NumericFault { op: &'static str },

    /// The finite-difference oracle saw two different values for the same input.
    #[error("oracle fault: function is not deterministic ({first} vs {second})")]
    OracleFault { first: f64, second: f64 },

    #[error("format fault at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("checkpoint fault: {0}")]
    Checkpoint(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("input fault: {0}")]
    Input(String),

    /// Training aborted because step `step` hit a numeric fault.
    #[error("training diverged at step {step}: {source}")]
    Diverged {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    /// True for faults raised by non-finite values, including a diverged training run.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NumericFault { .. } | Error::Diverged { .. })
    }
}
