//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid mesh construction parameters or inconsistent mesh data.
    #[error("mesh: {0}")]
    Mesh(String),

    /// Field/mesh mismatch, wrong length, non-finite values, wrong role.
    #[error("field: {0}")]
    Field(String),

    /// Assembly rejected its inputs (e.g. nonpositive diffusion coefficient).
    #[error("assembly: {0}")]
    Assembly(String),

    /// Linear solver failure: singular reduced system or residual above tolerance.
    #[error("solver: {0}")]
    Solver(String),

    /// Newton iteration on the semilinear Poisson equation did not converge.
    #[error("newton diverged after {iterations} iterations (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    /// Argument outside the documented domain of an operation.
    #[error("domain: {0}")]
    Domain(String),

    /// Numerical failure (eigensolver breakdown, non-finite intermediate).
    #[error("numerical: {0}")]
    Numerical(String),

    /// Config file parse or validation failure.
    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Wraps an error with the pipeline stage it occurred in.
    #[error("[stage:{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Stage tag if this error (or its cause chain root) is stage-tagged.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            Error::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
