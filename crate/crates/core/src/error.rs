use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("no ratings")]
    NoRatings,
    #[error("duplicate rating of {stimulus} by observer {observer}")]
    DuplicateRating { observer: String, stimulus: String },
    #[error("rating {0} outside the declared scale bounds")]
    RatingOutOfBounds(f64),
    #[error("invalid count {0}")]
    InvalidCount(f64),
    #[error("unknown stimulus: {0}")]
    UnknownStimulus(String),
    #[error("at least two stimuli are required, got {0}")]
    TooFewStimuli(usize),
    #[error("incompatible matrices: {0}")]
    IncompatibleMatrices(String),
    #[error("invalid dispersion: {0}")]
    InvalidDispersion(f64),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("disconnected design: components {0:?}")]
    DisconnectedDesign(Vec<Vec<String>>),
    #[error("singular information matrix")]
    SingularInformation,
    #[error("quadrature order {0} out of range 1..=128")]
    QuadratureOrder(usize),
    #[error("pair ({0}, {1}) is not a valid pair of distinct stimuli")]
    InvalidPair(usize, usize),
    #[error("batch exceeds pair universe: {requested} > {available}")]
    BatchTooLarge { requested: usize, available: usize },
    #[error("ACR data required")]
    AcrRequired,
    #[error("unsolicited response for pair ({0}, {1})")]
    UnsolicitedResponse(String, String),
    #[error("budget exhausted")]
    BudgetExhausted,
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
