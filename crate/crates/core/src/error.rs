use thiserror::Error;

/// Errors produced by the numerical kernels and solvers.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error in `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch for {what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("projection failed: {0}")]
    Projection(String),

    #[error("parallel transport failed: {0}; shrink the step")]
    Transport(String),

    #[error("input is not tangent: violation {violation:.3e} exceeds {tolerance:.1e}")]
    NotTangent { violation: f64, tolerance: f64 },

    #[error("inadmissible frequency ({0}, {1}) for this spin structure")]
    InadmissibleFrequency(f64, f64),

    #[error("winding computation is ill-conditioned: {0}")]
    IllConditioned(String),

    #[error("homotopy class mismatch: expected {expected}, found {found}")]
    ClassMismatch { expected: String, found: String },

    #[error("eigensolver did not converge after {iterations} iterations ({converged} of {wanted} pairs, worst residual {residual:.3e})")]
    Eigensolver {
        iterations: usize,
        converged: usize,
        wanted: usize,
        residual: f64,
    },

    #[error("spectral data has no positive eigenspinors")]
    EmptyPositiveSubspace,

    #[error("spectral data was computed for a different map")]
    StaleSpectralData,

    #[error("mountain-pass profile never turns down up to r = {radius:.3e}")]
    NoTurnDown { radius: f64 },

    #[error("mountain-pass profile never increases along e+")]
    ProfileNotIncreasing,

    #[error("line search failed at iteration {iteration} (step {step:.3e})")]
    LineSearch { iteration: usize, step: f64 },

    #[error("solver did not converge: {0}")]
    NotConverged(String),

    #[error("flow step rejected {rejections} times in a row at t = {time:.4e}")]
    StepRejection { rejections: usize, time: f64 },

    #[error("experiment aborted: {0}")]
    Experiment(String),

    #[error("perturbation hook failed: {0}")]
    Hook(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
