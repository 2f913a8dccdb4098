use std::path::PathBuf;

/// Errors raised anywhere in the core crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("unsupported channel count: {0} (only mono is supported)")]
    UnsupportedChannels(u16),
    #[error("unsupported bit depth: {bits}-bit {format} (only 16-bit integer PCM is supported)")]
    UnsupportedBitDepth { bits: u16, format: &'static str },
    #[error("malformed audio file {path}: {reason}")]
    MalformedAudio { path: PathBuf, reason: String },
    #[error("malformed feature file: {0}")]
    MalformedFeatures(String),
    #[error("speed factor {0} outside the supported range (0.5, 2.0)")]
    FactorOutOfRange(String),
    #[error("speed factor {factor} is not part of the perturbation rule {{{allowed}}}")]
    FactorNotInRule { factor: String, allowed: String },
    #[error("invalid perturbation rule: {0}")]
    InvalidRule(String),
    #[error("invalid speaker id {0:?}: ids must be non-empty and must not contain '#' or whitespace")]
    InvalidSpeakerId(String),
    #[error("empty waveform")]
    EmptyWaveform,
    #[error("waveform of {len} samples is shorter than one analysis window ({window} samples)")]
    TooShort { len: usize, window: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown {what} {given:?}; valid options: {valid}")]
    UnknownComponent {
        what: &'static str,
        given: String,
        valid: String,
    },
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("variable {0} is detached from the gradient graph")]
    Detached(usize),
    #[error("zero-norm vector in {0}")]
    ZeroVector(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("duplicate utterance id {0:?}")]
    DuplicateUtterance(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("utterance {0:?} is missing from the embedding table")]
    MissingUtterance(String),
    #[error("degenerate cohort: standard deviation {0:e} of the top-N scores is below 1e-12")]
    DegenerateCohort(f64),
    #[error("metric needs both classes: {0}")]
    SingleClass(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
