use crate::autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("parameter `{0}` has a non-finite gradient")]
    NonFiniteGrad(String),
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("slow path needs a non-empty buffer snapshot")]
    EmptySnapshot,
    #[error("memory state used before episode reset")]
    UninitializedMemory,
    #[error("ego is {0:.2} m from the route (limit 20 m)")]
    OffRoute(f64),
    #[error("training diverged at step {step}: non-finite {component}")]
    Divergence { step: u64, component: String },
    #[error("config hash mismatch: checkpoint has {expected}, run has {got}")]
    ConfigMismatch { expected: String, got: String },
    #[error("dataset generation failed: {0}")]
    Generation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(context: impl Into<String>, expected: &[usize], got: &[usize]) -> Error {
    Error::Shape {
        context: context.into(),
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}
