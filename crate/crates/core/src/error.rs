use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("layer {layer}: {message}")]
    Layer { layer: usize, message: String },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("label vector has no class set")]
    ZeroLabel,

    #[error("neighborhood has neither positives nor negatives")]
    EmptyNeighborhood,

    #[error("code length {k} exceeds exhaustive search limit {max}")]
    CodeTooLong { k: usize, max: usize },

    #[error("no database sample shares a class with the requested label")]
    NoPositives,

    #[error("no label in the pool is disjoint from the query label")]
    NoDisjointLabel,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed file at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("stage `{stage}` requires `{prerequisite}` to run first (missing {path})")]
    MissingArtifact {
        stage: String,
        prerequisite: String,
        path: PathBuf,
    },

    #[error("training diverged at epoch {epoch}: {reason}{}", checkpoint_hint(.checkpoint))]
    Divergence {
        epoch: usize,
        reason: String,
        checkpoint: Option<PathBuf>,
    },

    #[error("oracle check failed: {0}")]
    OracleViolation(String),

    #[error("artifact directory is locked by another run: {0}")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn checkpoint_hint(checkpoint: &Option<PathBuf>) -> String {
    match checkpoint {
        Some(p) => format!(" (last good checkpoint: {})", p.display()),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context: context.to_owned(),
            expected,
            found,
        });
    }
    Ok(())
}
