use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(&'static str),

    /// A localization window holds more than one sign change, or none where a root is expected.
    #[error("bracketing failure for m={m} on ({lo:.6}, {hi:.6}): {sign_changes} sign changes")]
    BracketingFailure {
        m: i64,
        lo: f64,
        hi: f64,
        sign_changes: usize,
    },

    #[error("root refinement did not converge for m={m} on ({lo:.6}, {hi:.6}) after {iterations} iterations")]
    NonConvergence {
        m: i64,
        lo: f64,
        hi: f64,
        iterations: usize,
    },

    #[error("roots {l} and {next} of m={m} are {separation:e} apart")]
    DuplicateRoot {
        m: i64,
        l: usize,
        next: usize,
        separation: f64,
    },

    #[error("degenerate eigenfunction coefficients for m={m}, l={l}")]
    DegenerateCoefficients { m: i64, l: usize },

    #[error("time step too large: |lambda| h = {product:.3} exceeds 50 (lambda = {lambda:.3e})")]
    StepTooLarge { lambda: f64, product: f64 },

    #[error("moment matrix for m={m} is ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { m: i64, condition: f64 },

    #[error("control signals for m={m} and m={pair} are not conjugate (mismatch {mismatch:.3e})")]
    ConjugacyViolation { m: i64, pair: i64, mismatch: f64 },

    #[error("numerical breakdown: {0}")]
    NumericalBreakdown(String),

    #[error("constraint violation: {0}")]
    ConstraintViolation(String),

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

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for failures of the numerics (as opposed to bad input or IO).
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::BracketingFailure { .. }
            | Error::NonConvergence { .. }
            | Error::DuplicateRoot { .. }
            | Error::DegenerateCoefficients { .. }
            | Error::StepTooLarge { .. }
            | Error::IllConditioned { .. }
            | Error::ConjugacyViolation { .. }
            | Error::NumericalBreakdown(_) => true,
            Error::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn context_with(self, f: impl FnOnce() -> String) -> Result<T>;
}

impl<T, E: Into<Error>> ResultExt<T> for std::result::Result<T, E> {
    fn context_with(self, f: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| e.into().context(f()))
    }
}
