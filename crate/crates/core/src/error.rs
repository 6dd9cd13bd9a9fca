use thiserror::Error;

use crate::lattice::NodeId;

/// Errors raised by lattice solvers and the experiment harness.
#[derive(Debug, Error)]
pub enum LabError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("level {level} is outside the horizon of a depth-{depth} lattice")]
    OutOfHorizon { level: usize, depth: usize },

    #[error("incomplete process: {0}")]
    IncompleteProcess(String),

    #[error("non-finite value at {node}: {detail}")]
    Divergence { node: NodeId, detail: String },

    #[error(
        "implicit step at {node} did not converge after {iterations} iterations \
         (L_y*h = {lipschitz_step:.3e}); use a smaller step"
    )]
    FixedPoint {
        node: NodeId,
        iterations: usize,
        lipschitz_step: f64,
    },

    #[error("no convergence after {iterations} iterations (last delta {last_delta:.3e}, last ratio {last_ratio:.3e})")]
    NonConvergence {
        iterations: usize,
        last_delta: f64,
        last_ratio: f64,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("work budget exceeded: {requested} units requested, {budget} allowed")]
    Budget { requested: u128, budget: u128 },

    #[error("quadrature failed: {0}")]
    Quadrature(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("config: {0}")]
    Config(String),

    #[error("scenario `{scenario}`: {source}")]
    Scenario {
        scenario: String,
        #[source]
        source: Box<LabError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;
