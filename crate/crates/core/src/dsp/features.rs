//! Frame-level feature matrices and the SPKF container.
//!
//! SPKF layout (little-endian): `b"SPKF"`, `u32` frames, `u32` dims, `f32` frame rate,
//! then frames x dims `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::Scalar;

pub const SPKF_MAGIC: &[u8; 4] = b"SPKF";

/// Frames x dims matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence<T> {
    values: Vec<T>,
    frames: usize,
    dim: usize,
    pub frame_rate: f64,
}

impl<T: Scalar> FeatureSequence<T> {
    pub fn new(values: Vec<T>, frames: usize, dim: usize, frame_rate: f64) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Shape {
                op: "feature sequence",
                detail: format!("empty {frames}x{dim}"),
            });
        }
        if values.len() != frames * dim {
            return Err(Error::Shape {
                op: "feature sequence",
                detail: format!("{} values for {frames}x{dim}", values.len()),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature sequence".into()));
        }
        Ok(Self {
            values,
            frames,
            dim,
            frame_rate,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[T] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    /// Dims x frames copy, the channel-first layout used by the network.
    pub fn transposed(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.values.len()];
        for t in 0..self.frames {
            for d in 0..self.dim {
                out[d * self.frames + t] = self.values[t * self.dim + d];
            }
        }
        out
    }
}

pub fn write_spkf<T: Scalar>(path: impl AsRef<Path>, feats: &FeatureSequence<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + 4 * feats.values.len());
    buf.extend_from_slice(SPKF_MAGIC);
    buf.extend_from_slice(&(feats.frames as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(feats.frame_rate as f32).to_le_bytes());
    for v in &feats.values {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_spkf<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureSequence<T>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[..4] != SPKF_MAGIC {
        return Err(Error::MalformedFeatures(format!(
            "{}: missing SPKF header",
            path.display()
        )));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let frames = u32::from_le_bytes(word(4)) as usize;
    let dim = u32::from_le_bytes(word(8)) as usize;
    let frame_rate = f32::from_le_bytes(word(12));
    let expected = 16 + 4 * frames * dim;
    if bytes.len() != expected {
        return Err(Error::MalformedFeatures(format!(
            "{}: {frames}x{dim} header needs {expected} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    let values = (0..frames * dim)
        .map(|i| T::of(f64::from(f32::from_le_bytes(word(16 + 4 * i)))))
        .collect();
    FeatureSequence::new(values, frames, dim, f64::from(frame_rate))
        .map_err(|e| Error::MalformedFeatures(format!("{}: {e}", path.display())))
}
