use sobolev_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("point ({x}, {y}) lies outside the {function} domain")]
    OutsideDomain { function: &'static str, x: f64, y: f64 },

    #[error("{function} is not differentiable at ({x}, {y})")]
    NotDifferentiable { function: &'static str, x: f64, y: f64 },

    #[error("loss order {order} needs derivative data the batch does not carry: {reason}")]
    MissingDerivatives { order: usize, reason: String },

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("not a Gaussian value/derivative pair: {0}")]
    NotGaussian(String),

    #[error("construction failed: {0}")]
    Construction(String),

    #[error("malformed checkpoint at line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
