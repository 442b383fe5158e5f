use thiserror::Error;

/// Errors raised by the geometry, solver, loss, and experiment layers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("rotation angle {angle} is too close to pi for an unambiguous logarithm")]
    AmbiguousLog { angle: f64 },

    #[error("alignment is degenerate: {0}")]
    DegenerateAlignment(&'static str),

    #[error("depth must be positive, got {0}")]
    InvalidDepth(f64),

    #[error("point is behind the camera (z = {z})")]
    Cheirality { z: f64 },

    #[error("window [{first}, {first}+{count}) is empty or out of range for {n_frames} frames")]
    EmptyWindow {
        first: usize,
        count: usize,
        n_frames: usize,
    },

    #[error("reduced pose system is singular after damping")]
    IllPosedWindow,

    #[error("solution carries no linearization cache")]
    BackwardBeforeForward,

    #[error("flow-loss gradient norm is zero; keep the previous balance coefficient")]
    DegenerateBalance,

    #[error("finite-difference oracle evaluated a non-finite value at coordinate {index}")]
    OracleDomain { index: usize },

    #[error("infeasible configuration: {0}")]
    InfeasibleConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("too few scenes survived the batch ({survived} of {total})")]
    BatchFailure { survived: usize, total: usize },

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("serialization: {0}")]
    Serialization(String),
}

pub type Result<T> = std::result::Result<T, Error>;
