use std::path::PathBuf;

/// Errors raised by the recipe runner, corpus tools and registry.
#[derive(Debug, thiserror::Error)]
pub enum RecipeError {
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error(transparent)]
    Core(#[from] spkforge_core::Error),
    #[error("{0}")]
    Io(String),
    #[error("stage {stage} ({name}) failed: {source}")]
    Stage {
        stage: u8,
        name: &'static str,
        #[source]
        source: Box<RecipeError>,
    },
    #[error("invalid stage range: start {start} is after stop {stop}")]
    StageRange { start: u8, stop: u8 },
    #[error("stage {0} is outside 1..=10")]
    UnknownStage(u8),
    #[error("stage {stage} needs {path}, which does not exist; run the earlier stages first")]
    MissingInput { stage: u8, path: PathBuf },
    #[error("experiment directory {0} is locked by another run (remove {0}/.lock if stale)")]
    Locked(PathBuf),
    #[error("trials: {0}")]
    Trials(String),
    #[error("unknown model {name:?}; available models: {available}")]
    UnknownModel { name: String, available: String },
    #[error("model {name:?} is already registered with different content")]
    DuplicateModel { name: String },
    #[error("hash mismatch for model {name:?}: expected {expected}, found {found}")]
    HashMismatch {
        name: String,
        expected: String,
        found: String,
    },
    #[error("malformed package {path}: {msg}")]
    Package { path: PathBuf, msg: String },
    #[error("packaged model does not reproduce embeddings: max deviation {0:e}")]
    NotReproducible(f64),
}

pub type Result<T, E = RecipeError> = std::result::Result<T, E>;

impl From<std::io::Error> for RecipeError {
    fn from(e: std::io::Error) -> Self {
        RecipeError::Io(e.to_string())
    }
}

impl RecipeError {
    /// Process exit code: the failing stage number, or 20 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RecipeError::Stage { stage, .. } => i32::from(*stage),
            _ => 20,
        }
    }
}
