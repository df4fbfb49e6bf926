use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid task spec: {0}")]
    InvalidTaskSpec(String),

    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("token {token} is outside the vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: u16, vocab_size: usize },

    #[error("context spec has {states} states, above the budget of {budget}")]
    StateBudgetExceeded { states: usize, budget: usize },

    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),

    #[error("training collapse at step {step}: gradient norm is {norm}")]
    TrainingCollapse { step: usize, norm: f64 },

    #[error("non-finite RFT loss in minibatch {minibatch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, minibatch: usize },

    #[error("non-finite gradient entry at state {state}, token {token}")]
    NonFiniteGradient { state: u32, token: usize },

    #[error("no evaluated checkpoints to select from")]
    NoCheckpoints,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown problem id {0}")]
    UnknownProblem(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("artifact {0} already exists and differs from the new content")]
    ImmutableArtifact(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
