use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("point {point:?} lies outside the reference cell")]
    OutsideReference { point: Vec<f64> },

    #[error("weighted Gauss rule (b = {b}, n = {n}) failed: {reason}")]
    Quadrature { b: f64, n: usize, reason: String },

    #[error(
        "weight exponent {exponent:.3e} on cell {cell} exceeds the overflow guard; \
         use the centered weight mode instead"
    )]
    WeightOverflow { cell: usize, exponent: f64 },

    #[error("local system on cell {cell} is singular or ill-conditioned (condition estimate {condition:.3e})")]
    LocalSystem { cell: usize, condition: f64 },

    #[error("global trace system is singular: {0}")]
    SingularTrace(String),

    #[error(
        "linear solve did not reach the requested tolerance: relative residual {residual:.3e}"
    )]
    LinearSolve { residual: f64 },

    #[error("tridiagonal system is singular at row {row}")]
    SingularTridiagonal { row: usize },

    #[error("root solve for the neutrality condition failed: {0}")]
    RootSolve(String),

    #[error(
        "damped Newton did not converge after {iterations} steps (residual history {history:?})"
    )]
    NewtonDiverged {
        iterations: usize,
        history: Vec<f64>,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.context(context()))
    }
}
