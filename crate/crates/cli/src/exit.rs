use mutud::config::ConfigError;
use mutud::diagnostics::DiagnosticsError;
use mutud::training::TrainingError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(kind: Kind, error: impl Into<anyhow::Error>) -> Self {
        Self { kind, error: error.into() }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(Kind::Config, e)
    }
}

impl From<TrainingError> for Failure {
    fn from(e: TrainingError) -> Self {
        let kind = match &e {
            TrainingError::Config(_) | TrainingError::ConfigFile(_) | TrainingError::Model(_) => Kind::Config,
            TrainingError::NumericGuard(_) | TrainingError::Numerics(_) | TrainingError::Optimizer(_) => Kind::Numeric,
            TrainingError::Loss(_) => Kind::Numeric,
            TrainingError::SeedOverlap(_)
            | TrainingError::Checkpoint(_)
            | TrainingError::Io(_)
            | TrainingError::Signal(_) => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

impl From<DiagnosticsError> for Failure {
    fn from(e: DiagnosticsError) -> Self {
        let kind = match &e {
            DiagnosticsError::Config(_) | DiagnosticsError::NotMutud(_) => Kind::Config,
            DiagnosticsError::Numerics(_) => Kind::Numeric,
            _ => Kind::Data,
        };
        Failure::new(kind, e)
    }
}

/// Tag any other error with an exit kind.
pub trait Classify<T> {
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::new(Kind::Data, e))
    }
}
