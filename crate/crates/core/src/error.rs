use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("line {line}: unknown country code `{code}`")]
    UnknownCountry { line: u64, code: String },

    #[error("line {line}: prevalence {value} is outside the open interval (0, 1)")]
    PrevalenceOutOfRange { line: u64, value: f64 },

    #[error("conflicting duplicate observations for {country}/{population}/{year}: {first} vs {second}")]
    DuplicateConflict {
        country: String,
        population: String,
        year: i32,
        first: f64,
        second: f64,
    },

    #[error("index out of range: {0}")]
    IndexOutOfRange(String),

    #[error("temporal precision diagonal must be positive, got {0}")]
    NonPositiveDiagonal(f64),

    #[error("random-effect variance must be non-negative, got {0}")]
    NegativeVariance(f64),

    #[error("assembled matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("observed covariance block is singular")]
    SingularObservedBlock,

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("no valid starting point found after {attempts} attempts")]
    AllProposalsInvalid { attempts: usize },

    #[error("insufficient draws: {0}")]
    InsufficientDraws(String),

    #[error("mismatched draw counts: {left} vs {right}")]
    MismatchedDrawCounts { left: usize, right: usize },

    #[error("too few observations: {0}")]
    TooFewObservations(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("fold {fold} failed: {source}")]
    FoldFailed {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable, machine-parsable name of the error class.
    pub fn class(&self) -> &'static str {
        match self {
            Error::MalformedRow { .. } => "MalformedRow",
            Error::UnknownCountry { .. } => "UnknownCountry",
            Error::PrevalenceOutOfRange { .. } => "PrevalenceOutOfRange",
            Error::DuplicateConflict { .. } => "DuplicateConflict",
            Error::IndexOutOfRange(_) => "IndexOutOfRange",
            Error::NonPositiveDiagonal(_) => "NonPositiveDiagonal",
            Error::NegativeVariance(_) => "NegativeVariance",
            Error::NotPositiveDefinite => "NotPositiveDefinite",
            Error::SingularObservedBlock => "SingularObservedBlock",
            Error::InvalidPartition(_) => "InvalidPartition",
            Error::AllProposalsInvalid { .. } => "AllProposalsInvalid",
            Error::InsufficientDraws(_) => "InsufficientDraws",
            Error::MismatchedDrawCounts { .. } => "MismatchedDrawCounts",
            Error::TooFewObservations(_) => "TooFewObservations",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::MissingArtifact(_) => "MissingArtifact",
            Error::FoldFailed { .. } => "FoldFailed",
            Error::Io(_) => "IoError",
            Error::Csv(e) if e.is_io_error() => "IoError",
            Error::Csv(_) => "MalformedRow",
        }
    }
}
