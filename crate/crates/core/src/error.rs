use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid prompt geometry: 2p = {double_width} exceeds min(H, W) = {min_side}")]
    PromptGeometry { double_width: usize, min_side: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("stale tape: recorded at model generation {tape}, model is at {model}")]
    StaleTape { tape: u64, model: u64 },

    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("insufficient samples for class {class}: need {needed}, have {available}")]
    InsufficientSamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("degenerate cluster: {0}")]
    DegenerateCluster(String),

    #[error("no OOD evidence: no unlabeled sample was detected as OOD, even after narrowing the ID band to τ = {tau}")]
    NoOodEvidence { tau: f64 },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("training diverged during {stage} at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        stage: &'static str,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("artifact {path}: {reason}")]
    Artifact { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }
}
