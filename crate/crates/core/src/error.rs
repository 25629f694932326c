use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes shared across the toolkit. Display strings use the
/// kebab-case tags that also appear in report JSON.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid-parameter: {0}")]
    InvalidParameter(String),
    #[error("singular-frequency: power-law spectrum is undefined at omega = 0")]
    SingularFrequency,
    #[error("time-out-of-window: t = {time} outside [0, {total}]")]
    TimeOutOfWindow { time: f64, total: f64 },
    #[error("quadrature-failure: achieved error {achieved:e} (value {value:e})")]
    QuadratureFailure { value: f64, achieved: f64 },
    #[error("undersampled-bath: {0}")]
    UndersampledBath(String),
    #[error("decay-fit-failed: {0}")]
    DecayFitFailed(String),
    #[error("undecayed: no decay within window, T2 > {t2_lower_bound:.4} us")]
    Undecayed { t2_lower_bound: f64 },
    #[error("scaling-underdetermined: {0}")]
    ScalingUnderdetermined(String),
    #[error("spectrum-underdetermined: {0}")]
    SpectrumUnderdetermined(String),
    #[error("empty-spectrum: no usable coherence points")]
    EmptySpectrum,
    #[error("t1-fit-failed: {0}")]
    T1FitFailed(String),
    #[error("degenerate-fit: unidentifiable direction along {direction}")]
    DegenerateFit { direction: String },
    #[error("not-global: global fit needs at least 2 datasets, got {0}")]
    NotGlobal(usize),
    #[error("covariance-invalid: {0}")]
    CovarianceInvalid(String),
    #[error("nmr-not-found: {0}")]
    NmrNotFound(String),
    #[error("window-uncovered: {0}")]
    WindowUncovered(String),
    #[error("schema: field `{field}` (line {line}): {message}")]
    Schema {
        field: String,
        line: usize,
        message: String,
    },
    #[error("times-not-increasing: {0}")]
    TimesNotIncreasing(String),
    #[error("out-of-range: {0}")]
    OutOfRange(String),
    #[error("io: {0}")]
    Io(String),
}

impl Error {
    /// Short kebab-case tag, e.g. `"degenerate-fit"`.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::SingularFrequency => "singular-frequency",
            Error::TimeOutOfWindow { .. } => "time-out-of-window",
            Error::QuadratureFailure { .. } => "quadrature-failure",
            Error::UndersampledBath(_) => "undersampled-bath",
            Error::DecayFitFailed(_) => "decay-fit-failed",
            Error::Undecayed { .. } => "undecayed",
            Error::ScalingUnderdetermined(_) => "scaling-underdetermined",
            Error::SpectrumUnderdetermined(_) => "spectrum-underdetermined",
            Error::EmptySpectrum => "empty-spectrum",
            Error::T1FitFailed(_) => "t1-fit-failed",
            Error::DegenerateFit { .. } => "degenerate-fit",
            Error::NotGlobal(_) => "not-global",
            Error::CovarianceInvalid(_) => "covariance-invalid",
            Error::NmrNotFound(_) => "nmr-not-found",
            Error::WindowUncovered(_) => "window-uncovered",
            Error::Schema { .. } => "schema",
            Error::TimesNotIncreasing(_) => "times-not-increasing",
            Error::OutOfRange(_) => "out-of-range",
            Error::Io(_) => "io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
