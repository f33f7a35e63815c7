use thiserror::Error;

/// Errors raised by the simulation library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("velocity must be nonzero")]
    ZeroVelocity,
    #[error("trajectory is trapped inside the scattering region")]
    TrappedTrajectory,
    #[error("particle trapped at collision {index}")]
    TrappedEvent { index: usize },
    #[error("query time {t} outside [0, {t_max}]")]
    OutOfRange { t: f64, t_max: f64 },
    #[error("value must be strictly positive, got {0}")]
    NonPositive(f64),
    #[error("chain left its domain at step {index} (xi = {xi}, xi_minus = {xi_minus})")]
    BelowDomain { index: usize, xi: f64, xi_minus: f64 },
    #[error("invalid exit interval: need 0 < a_minus < 1 < a_plus, got ({a_minus}, {a_plus})")]
    InvalidInterval { a_minus: f64, a_plus: f64 },
    #[error("gamma = {0} is not in the transient regime gamma > 1/2")]
    SubcriticalGamma(f64),
    #[error("Bessel path degenerated near the origin")]
    DegeneratePath,
    #[error("perturbation term has no declared sup-bound")]
    MissingBound,
    #[error("no admissible L: step bound {c_step} >= 2^(eta_plus - 1) = {limit}")]
    InfeasibleL { c_step: f64, limit: f64 },
    #[error("initial value {xi0} is not inside any interval J_eta with eta > eta_plus")]
    OffGridStart { xi0: f64 },
    #[error("path is empty")]
    EmptyPath,
    #[error("no transitions above the requested level")]
    NoTransitions,
    #[error("too many trapped collisions at speed {speed}: {trapped} of {total}")]
    TrappedSamples { speed: f64, trapped: usize, total: usize },
    #[error("fit window too narrow: {0}")]
    WindowTooNarrow(String),
    #[error("barrier a_minus * xi0 = {lower} does not exceed xi_plus = {xi_plus}")]
    HypothesisRegionViolated { lower: f64, xi_plus: f64 },
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Validation(Vec<String>),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}
