use thiserror::Error;

/// Errors produced by analysis, construction and simulation routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid system: {0}")]
    Validation(String),

    #[error("unstable: class set {{{}}} has arrival rate exceeding its service capacity (margin {margin})", witness.join(","))]
    Unstable { witness: Vec<String>, margin: f64 },

    #[error("size cap exceeded for {what}: {size} > {cap}")]
    SizeCap { what: String, size: usize, cap: usize },

    #[error("unsupported query: {0}")]
    Unsupported(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("truncation failed: achieved tail bound {achieved:e}, requested {requested:e}")]
    TruncationFailure { achieved: f64, requested: f64 },

    #[error("assignment condition violated for busy set {{{}}}: orders {:?} and {:?} give products differing by {discrepancy:e}", busy.join(","), first, second)]
    AssignmentViolation {
        busy: Vec<String>,
        first: Vec<String>,
        second: Vec<String>,
        discrepancy: f64,
    },

    #[error("order-independence violated: {0}")]
    OiViolation(String),

    #[error("class server sets {{{}}} and {{{}}} overlap without nesting (classes {}, {})", first_set.join(","), second_set.join(","), first, second)]
    NotNested {
        first: String,
        second: String,
        first_set: Vec<String>,
        second_set: Vec<String>,
    },

    #[error("tolerance not met for {what}: {value:e} > {tolerance:e}")]
    Tolerance { what: String, value: f64, tolerance: f64 },

    #[error("simulation aborted: {0}")]
    SimulationAborted(String),

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// Short machine-readable name of the error kind.
    pub fn reason(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::Unstable { .. } => "unstable",
            Error::SizeCap { .. } => "size_cap",
            Error::Unsupported(_) => "unsupported",
            Error::InvalidState(_) => "invalid_state",
            Error::TruncationFailure { .. } => "truncation_failure",
            Error::AssignmentViolation { .. } => "assignment_violation",
            Error::OiViolation(_) => "oi_violation",
            Error::NotNested { .. } => "not_nested",
            Error::Tolerance { .. } => "tolerance",
            Error::SimulationAborted(_) => "simulation_aborted",
            Error::Io(_) => "io",
        }
    }
}
