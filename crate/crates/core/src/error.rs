use thiserror::Error;

pub type Result<T> = std::result::Result<T, IrcError>;

#[derive(Debug, Error)]
pub enum IrcError {
    /// A model or task parameter is outside its admissible range.
    #[error("parameter `{name}` = {value} is outside {range}")]
    ParameterDomain {
        name: &'static str,
        value: f64,
        range: &'static str,
    },

    /// An argument to an operation is out of range (colors, bins, locations).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("softmax value iteration did not converge in {iterations} sweeps (residual {residual:e})")]
    IterationLimit { iterations: usize, residual: f64 },

    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        condition_estimate: Option<f64>,
    },

    #[error("EM diverged at iteration {iteration}: log-likelihood fell from {previous} to {current}")]
    Divergence {
        iteration: usize,
        previous: f64,
        current: f64,
    },

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        /// 1-based line number, header included.
        row: usize,
        column: String,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl IrcError {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        IrcError::Numerical {
            message: message.into(),
            condition_estimate: None,
        }
    }

    /// True for errors caused by numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            IrcError::IterationLimit { .. } | IrcError::Numerical { .. } | IrcError::Divergence { .. }
        )
    }
}
