use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("round index {round} out of range (1..={rounds})")]
    RoundOutOfRange { round: usize, rounds: usize },

    #[error("expected {expected} subkeys for {rounds} rounds, got {got}")]
    KeyCountMismatch {
        expected: usize,
        rounds: usize,
        got: usize,
    },

    #[error("profile: {0}")]
    Profile(String),

    #[error("pair file: {0}")]
    PairFile(String),

    #[error("layout: {0}")]
    Layout(String),

    #[error("counter total {sum} does not match expected {expected}")]
    CountMismatch { sum: u64, expected: u64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("index space of {bits} bits exceeds the desk-scale limit of {limit} bits")]
    IndexSpaceTooLarge { bits: u32, limit: u32 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
