use thiserror::Error;

/// Errors raised anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("unknown op tag `{0}`")]
    UnknownOp(String),
    #[error("backward root must be scalar, got {0} elements")]
    NonScalarRoot(usize),
    #[error("optimizer state does not match parameter shapes")]
    StaleState,

    #[error("invalid action for agent {agent}: {detail}")]
    InvalidAction { agent: usize, detail: String },
    #[error("step called on a terminal state")]
    SteppedTerminal,
    #[error("operation requires discrete action spaces")]
    NonDiscrete,
    #[error("invalid game definition: {0}")]
    InvalidGame(String),
    #[error("unknown fixture `{0}`")]
    UnknownFixture(String),

    #[error("buffer is empty")]
    Empty,

    #[error("mix is undefined in independent mode")]
    ModeMismatch,
    #[error("reward entries differ across agents: {0:?}")]
    NonCooperative(Vec<f64>),

    #[error("opponent modeling is only defined for discrete opponents")]
    ContinuousOpponent,

    #[error("game is not zero-sum")]
    NotZeroSum,
    #[error("game is not seat-symmetric")]
    NotSymmetric,
    #[error("wrong shape: {0}")]
    WrongShape(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("traces were produced by parameter version {trace}, learner is at {current}")]
    StaleTrace { trace: u64, current: u64 },

    #[error("algorithm `{algo}` is incompatible with env `{env}`: {reason}")]
    IncompatibleAlgoEnv {
        algo: String,
        env: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
