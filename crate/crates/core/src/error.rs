use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid flow tensor: {0}")]
    InvalidFlow(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("no visible points")]
    NoVisiblePoints,
    #[error("unknown task id {0}")]
    UnknownTask(usize),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("no trials")]
    NoTrials,
    #[error("no episodes")]
    NoEpisodes,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
