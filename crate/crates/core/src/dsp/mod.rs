//! Audio I/O, speed perturbation, length normalization and log-mel features.

mod crop;
mod features;
mod mel;
mod perturb;
mod wave;

pub use crop::crop_or_duplicate;
pub use features::{read_spkf, write_spkf, FeatureSequence, SPKF_MAGIC};
pub use mel::{hz_to_mel, mel_spectrogram, mel_to_hz, MelConfig, MelExtractor};
pub use perturb::{relabel_speaker, speed_perturb, PerturbLabelRule, SpeedFactor};
pub use wave::{load_waveform, save_waveform, Waveform};
