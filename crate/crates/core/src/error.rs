use std::path::PathBuf;

use crate::corpus::TaskId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate pair_id `{0}`")]
    DuplicatePairId(String),

    #[error("label `{label}` is not admissible for task {task}; expected one of {admissible:?}")]
    InadmissibleLabel {
        label: String,
        task: TaskId,
        admissible: &'static [&'static str],
    },

    #[error("qq record `{0}` needs a non-empty group_id and an orig_rank")]
    MissingRanking(String),

    #[error("group `{group}` has orig_rank {rank} more than once")]
    DuplicateRank { group: String, rank: u32 },

    #[error("group `{0}` mixes different original question texts")]
    GroupTextMismatch(String),

    #[error("expected only {expected} records, found {found}")]
    MixedTasks { expected: TaskId, found: TaskId },

    #[error("requested {requested} samples from {available} records")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("corpus produced no tokens")]
    EmptyVocabulary,

    #[error("vector length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("jaccard needs binary vectors with at least one dimension")]
    NotBinary,

    #[error("feature mask has no active slots")]
    EmptyMask,

    #[error("unknown feature selection `{0}`")]
    UnknownFeature(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model has no head for task {0}")]
    UnknownTask(TaskId),

    #[error("missing class count for task {0}")]
    MissingClassCount(TaskId),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("label {index} out of range for {count} classes")]
    LabelOutOfRange { index: usize, count: usize },

    #[error("main task stream is empty")]
    EmptyStream,

    #[error("feature mask differs between task streams")]
    MaskMismatch,

    #[error("no training examples at fraction {0}")]
    EmptySubset(f64),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("featurizer does not match the model: {0}")]
    FingerprintMismatch(String),

    #[error("group `{0}` appears more than once")]
    DuplicateGroup(String),

    #[error("per-query maps have different keys")]
    KeyMismatch,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by bad inputs or configuration, as opposed to failures
    /// while running. The command line maps these to exit status 1.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Io { .. })
    }
}
