use std::path::Path;

use crate::error::{Error, Result};
use crate::Scalar;

/// Mono PCM audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }
}

/// Reads a 16-bit mono RIFF/PCM file, scaling samples by 1/32768.
pub fn load_waveform<T: Scalar>(path: impl AsRef<Path>) -> Result<Waveform<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let malformed = |e: hound::Error| Error::MalformedAudio {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let reader = hound::WavReader::open(path).map_err(malformed)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {}
        (hound::SampleFormat::Int, bits) => {
            return Err(Error::UnsupportedBitDepth { bits, format: "int" })
        }
        (hound::SampleFormat::Float, bits) => {
            return Err(Error::UnsupportedBitDepth {
                bits,
                format: "float",
            })
        }
    }
    let scale = T::of(1.0 / 32768.0);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| T::of(f64::from(v)) * scale))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(malformed)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit mono PCM. Samples are clipped to the int16 range.
pub fn save_waveform<T: Scalar>(path: impl AsRef<Path>, wave: &Waveform<T>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: wave.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::MalformedAudio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &wave.samples {
        let v = (s.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}
