use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed JSON in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("episode {episode}: missing field `{key}`")]
    MissingField { episode: String, key: String },
    #[error("episode {episode}, round {round}: label {label} out of range for {count} candidates")]
    LabelOutOfRange { episode: String, round: usize, label: usize, count: usize },
    #[error("round {round} out of range for an episode with {rounds} rounds")]
    RoundOutOfRange { round: usize, rounds: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("candidate has no tokens")]
    EmptyCandidate,
    #[error("every position is masked")]
    AllMasked,
    #[error("no candidates to score")]
    EmptyCandidateSet,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("index {index} out of range for {len} entries")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("persona level {level} out of range 0..={max}")]
    LevelOutOfRange { level: usize, max: usize },
    #[error("label {0} is not binary")]
    NonBinaryLabel(f64),
    #[error("persona count {count} out of range 0..={max}")]
    CountOutOfRange { count: usize, max: usize },
    #[error("cannot build an index from an empty corpus")]
    EmptyCorpus,
    #[error("k = {k} exceeds index size {size}")]
    KTooLarge { k: usize, size: usize },
    #[error("invalid selection: {0}")]
    SelectionInvalid(String),
    #[error("non-finite loss component: {0}")]
    NonFinite(String),
    #[error("training diverged at step {step}; last good checkpoint: {checkpoint:?}")]
    DivergenceDetected { step: usize, checkpoint: Option<PathBuf> },
    #[error("length mismatch: {hyps} hypotheses vs {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("misaligned prediction and gold streams: {0}")]
    Misalignment(String),
    #[error("corrupt archive: {0}")]
    Corrupt(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::FileNotFound(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json { context: context.into(), source }
    }
}
