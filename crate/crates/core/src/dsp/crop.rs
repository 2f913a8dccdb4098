use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::Scalar;

use super::Waveform;

/// Normalizes a waveform to exactly `round(target_seconds * rate)` samples.
///
/// Longer inputs are cropped at an offset drawn from `seed`; shorter ones are tiled.
pub fn crop_or_duplicate<T: Scalar>(
    w: &Waveform<T>,
    target_seconds: f64,
    seed: u64,
) -> Result<Waveform<T>> {
    if w.is_empty() {
        return Err(Error::EmptyWaveform);
    }
    if !(target_seconds > 0.0) || !target_seconds.is_finite() {
        return Err(Error::Config(format!(
            "target duration must be positive, got {target_seconds}"
        )));
    }
    let target = (target_seconds * f64::from(w.sample_rate)).round() as usize;
    let len = w.len();
    let samples = if len >= target {
        let offset = if len == target {
            0
        } else {
            ChaCha8Rng::seed_from_u64(seed).gen_range(0..=len - target)
        };
        w.samples[offset..offset + target].to_vec()
    } else {
        w.samples.iter().copied().cycle().take(target).collect()
    };
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(n: usize) -> Waveform<f64> {
        Waveform::new((0..n).map(|i| i as f64 / n as f64).collect(), 16000).unwrap()
    }

    #[test]
    fn exact_length_is_identity() {
        let w = ramp(48000);
        assert_eq!(crop_or_duplicate(&w, 3.0, 7).unwrap(), w);
    }

    #[test]
    fn short_input_is_tiled() {
        let w = ramp(16000);
        let out = crop_or_duplicate(&w, 3.0, 0).unwrap();
        assert_eq!(out.len(), 48000);
        // tiling oracle: three back-to-back copies
        let expected: Vec<f64> = (0..3).flat_map(|_| w.samples.clone()).collect();
        assert_eq!(out.samples, expected);
    }

    #[test]
    fn long_input_crop_is_seeded() {
        let w = ramp(80000);
        let a = crop_or_duplicate(&w, 3.0, 11).unwrap();
        let b = crop_or_duplicate(&w, 3.0, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 48000);
        // contiguous window of the input
        let start = w.samples.iter().position(|&s| s == a.samples[0]).unwrap();
        assert_eq!(&w.samples[start..start + 48000], &a.samples[..]);
    }

    #[test]
    fn empty_is_error() {
        let w = Waveform::<f64> {
            samples: vec![],
            sample_rate: 16000,
        };
        assert!(matches!(crop_or_duplicate(&w, 1.0, 0), Err(Error::EmptyWaveform)));
    }

    proptest! {
        #[test]
        fn output_length_exact(len in 1usize..5000, target in 0.001f64..0.5, seed in any::<u64>()) {
            let w = ramp(len);
            let out = crop_or_duplicate(&w, target, seed).unwrap();
            prop_assert_eq!(out.len(), (target * 16000.0).round() as usize);
        }
    }
}
