use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("missing attribute `{0}`")]
    MissingAttribute(String),

    #[error("attribute `{attribute}` has unknown value `{value}`")]
    UnknownAttributeValue { attribute: String, value: String },

    #[error("character {0:?} is not in the vocabulary")]
    OutOfVocabulary(char),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error(
        "privacy budget exhausted at step {step}: ε would reach {epsilon:.6} > target {target:.6}"
    )]
    BudgetExhausted {
        step: usize,
        epsilon: f64,
        target: f64,
    },

    #[error(
        "target ε = {epsilon} at δ = {delta} unreachable with noise multiplier in [{lo}, {hi}]"
    )]
    CalibrationUnreachable {
        epsilon: f64,
        delta: f64,
        lo: f64,
        hi: f64,
    },

    #[error("generating example {index}: {source}")]
    Generation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn in_phase(self, phase: &'static str) -> Self {
        match self {
            e @ Error::Phase { .. } => e,
            e => Error::Phase {
                phase,
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, looking through phase wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Phase { source, .. } | Error::Generation { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn is_budget(&self) -> bool {
        matches!(
            self.root(),
            Error::BudgetExhausted { .. } | Error::CalibrationUnreachable { .. }
        )
    }

    pub fn is_numeric(&self) -> bool {
        matches!(
            self.root(),
            Error::NonFinite { .. } | Error::Diverged { .. }
        )
    }

    pub fn is_config(&self) -> bool {
        matches!(
            self.root(),
            Error::Config { .. }
                | Error::InvalidArgument(_)
                | Error::Parse { .. }
                | Error::MissingAttribute(_)
                | Error::UnknownAttributeValue { .. }
                | Error::OutOfVocabulary(_)
        )
    }
}
