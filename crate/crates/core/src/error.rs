use thiserror::Error;

use crate::engagement::EngagementState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: missile and target positions coincide")]
    DegenerateGeometry,

    /// The range collapsed to zero or below during a discrete step.
    #[error("range collapsed to {:.6} m", state.r)]
    RangeCollapsed { state: EngagementState },

    #[error("time {t} s outside script span [0, {span}] s")]
    TimeOutOfRange { t: f64, span: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("trajectory of {len} samples is shorter than window + horizon ({need})")]
    TrajectoryTooShort { len: usize, need: usize },

    #[error("requested horizon {requested} steps exceeds the model horizon ({available})")]
    HorizonExceeded { requested: usize, available: usize },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("non-finite state at t = {t} s")]
    NonFinite { t: f64 },

    #[error("bad file format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
