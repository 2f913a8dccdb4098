//! Log-mel spectrogram front-end.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::Scalar;

use super::{FeatureSequence, Waveform};

/// Log-mel analysis parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MelConfig {
    pub n_mels: usize,
    pub window_ms: u32,
    pub hop_ms: u32,
    pub fft_size: usize,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            window_ms: 25,
            hop_ms: 10,
            fft_size: 512,
            log_floor: 1e-10,
        }
    }
}

impl MelConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (u64::from(sample_rate) * u64::from(self.window_ms) / 1000) as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (u64::from(sample_rate) * u64::from(self.hop_ms) / 1000) as usize
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let win = self.window_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        let fail = |m: String| Err(Error::Config(m));
        if self.n_mels == 0 {
            return fail("n_mels must be at least 1".into());
        }
        if win == 0 || hop == 0 {
            return fail("window and hop must span at least one sample".into());
        }
        if self.hop_ms > self.window_ms {
            return fail(format!(
                "hop ({} ms) exceeds window ({} ms)",
                self.hop_ms, self.window_ms
            ));
        }
        if self.fft_size < win {
            return fail(format!(
                "fft_size {} is smaller than the {win}-sample window",
                self.fft_size
            ));
        }
        if !(self.log_floor > 0.0) {
            return fail("log_floor must be positive".into());
        }
        Ok(())
    }

    /// Number of frames produced for `len` samples, if at least one window fits.
    pub fn num_frames(&self, len: usize, sample_rate: u32) -> Option<usize> {
        let win = self.window_samples(sample_rate);
        let hop = self.hop_samples(sample_rate);
        (len >= win).then(|| 1 + (len - win) / hop)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed window, filterbank and FFT plan for one sample rate.
#[derive(Clone)]
pub struct MelExtractor<T: Scalar> {
    cfg: MelConfig,
    sample_rate: u32,
    window: Vec<T>,
    /// (first FFT bin, weights) per mel band.
    filters: Vec<(usize, Vec<T>)>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> MelExtractor<T> {
    pub fn new(cfg: &MelConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let win = cfg.window_samples(sample_rate);
        // periodic Hann
        let window = (0..win)
            .map(|n| {
                T::of(0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / win as f64).cos())
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            filters: Self::filterbank(cfg, sample_rate),
            cfg: cfg.clone(),
            sample_rate,
            window,
            fft,
        })
    }

    /// Centre frequency in Hz of each mel band.
    pub fn center_frequencies(&self) -> Vec<f64> {
        Self::band_edges(&self.cfg, self.sample_rate)[1..=self.cfg.n_mels].to_vec()
    }

    fn band_edges(cfg: &MelConfig, sample_rate: u32) -> Vec<f64> {
        let top = hz_to_mel(f64::from(sample_rate) / 2.0);
        (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (cfg.n_mels + 1) as f64))
            .collect()
    }

    fn filterbank(cfg: &MelConfig, sample_rate: u32) -> Vec<(usize, Vec<T>)> {
        let edges = Self::band_edges(cfg, sample_rate);
        let bins = cfg.fft_size / 2 + 1;
        let bin_hz = f64::from(sample_rate) / cfg.fft_size as f64;
        (0..cfg.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let weights: Vec<f64> = (0..bins)
                    .map(|b| {
                        let f = b as f64 * bin_hz;
                        ((f - lo) / (mid - lo)).min((hi - f) / (hi - mid)).max(0.0)
                    })
                    .collect();
                let first = weights.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                let kept = if last >= first {
                    weights[first..=last].iter().map(|&w| T::of(w)).collect()
                } else {
                    Vec::new()
                };
                (first, kept)
            })
            .collect()
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    pub fn compute(&self, w: &Waveform<T>) -> Result<FeatureSequence<T>> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::Config(format!(
                "extractor built for {} Hz, got {} Hz audio",
                self.sample_rate, w.sample_rate
            )));
        }
        let win = self.window.len();
        let hop = self.cfg.hop_samples(self.sample_rate);
        let n_frames = self
            .cfg
            .num_frames(w.len(), self.sample_rate)
            .ok_or(Error::TooShort {
                len: w.len(),
                window: win,
            })?;
        let n_fft = self.cfg.fft_size;
        let floor = T::of(self.cfg.log_floor);
        let mut buf = vec![Complex::<T>::default(); n_fft];
        let mut scratch = vec![Complex::<T>::default(); self.fft.get_inplace_scratch_len()];
        let mut power = vec![T::zero(); n_fft / 2 + 1];
        let mut frames = Vec::with_capacity(n_frames * self.cfg.n_mels);
        for t in 0..n_frames {
            let chunk = &w.samples[t * hop..t * hop + win];
            for (slot, (&s, &h)) in buf.iter_mut().zip(chunk.iter().zip(&self.window)) {
                *slot = Complex::new(s * h, T::zero());
            }
            buf[win..].fill(Complex::default());
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for (first, weights) in &self.filters {
                let energy: T = weights
                    .iter()
                    .zip(&power[*first..])
                    .map(|(&wt, &p)| wt * p)
                    .sum();
                frames.push(energy.max(floor).ln());
            }
        }
        FeatureSequence::new(
            frames,
            n_frames,
            self.cfg.n_mels,
            f64::from(self.sample_rate) / hop as f64,
        )
    }
}

/// One-shot log-mel spectrogram; prefer [`MelExtractor`] when processing many inputs.
pub fn mel_spectrogram<T: Scalar>(w: &Waveform<T>, cfg: &MelConfig) -> Result<FeatureSequence<T>> {
    MelExtractor::new(cfg, w.sample_rate)?.compute(w)
}
