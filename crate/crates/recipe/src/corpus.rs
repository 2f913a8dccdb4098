//! Synthetic multi-speaker corpus of formant-filtered pulse trains.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spkforge_core::dsp::{save_waveform, Waveform};
use spkforge_core::trainer::{Manifest, ManifestEntry};

use crate::error::Result;

pub const CORPUS_SAMPLE_RATE: u32 = 16000;

/// Fixed voice characteristics of one synthetic speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Voice {
    pub f0: f64,
    pub formants: [f64; 4],
    pub bandwidths: [f64; 4],
    /// One-pole low-pass coefficient applied to the excitation.
    pub tilt: f64,
    /// Aspiration noise mixed into the excitation.
    pub breath: f64,
    /// Pulse shape: open-phase fraction of the glottal cycle.
    pub open_quotient: f64,
}

impl Voice {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            f0: rng.gen_range(90.0..250.0),
            formants: [
                rng.gen_range(300.0..900.0),
                rng.gen_range(900.0..2300.0),
                rng.gen_range(2300.0..3200.0),
                rng.gen_range(3300.0..4500.0),
            ],
            bandwidths: [
                rng.gen_range(50.0..130.0),
                rng.gen_range(70.0..160.0),
                rng.gen_range(100.0..220.0),
                rng.gen_range(150.0..300.0),
            ],
            tilt: rng.gen_range(0.2..0.85),
            breath: rng.gen_range(0.02..0.25),
            open_quotient: rng.gen_range(0.3..0.8),
        }
    }
}

/// Two-pole resonator with unit gain at its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    g: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, sr: f64) -> Self {
        let r = (-PI * bw / sr).exp();
        let theta = 2.0 * PI * freq.min(0.45 * sr) / sr;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            g: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bw: f64, sr: f64) {
        let n = Self::new(freq, bw, sr);
        self.a1 = n.a1;
        self.a2 = n.a2;
        self.g = n.g;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.g * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Renders one utterance of `voice`; all session variability is drawn from `rng`.
pub fn synthesize(voice: &Voice, seconds: f64, rng: &mut impl Rng) -> Vec<f64> {
    let sr = f64::from(CORPUS_SAMPLE_RATE);
    let n = (seconds * sr).round() as usize;
    let f0 = voice.f0 * (1.0 + rng.gen_range(-0.06..0.06));
    let shift = 1.0 + rng.gen_range(-0.04..0.04);
    let gain = rng.gen_range(0.3..0.9);
    let snr_db = rng.gen_range(5.0..20.0);
    let eq = rng.gen_range(-0.4..0.4);
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_depth = rng.gen_range(0.01..0.05);

    // syllable plan: (end sample, voiced, per-syllable formant scale)
    let mut syllables = Vec::new();
    let mut t = 0usize;
    while t < n {
        let len = (rng.gen_range(0.12..0.35) * sr) as usize;
        let voiced = rng.gen_bool(0.8);
        let vowel: [f64; 4] = std::array::from_fn(|_| 1.0 + rng.gen_range(-0.08..0.08));
        t += len;
        syllables.push((t.min(n), len, voiced, vowel));
    }

    let mut res: Vec<Resonator> = (0..4)
        .map(|k| Resonator::new(voice.formants[k] * shift, voice.bandwidths[k], sr))
        .collect();
    let mut out = Vec::with_capacity(n);
    let mut phase = 0.0f64;
    let mut lp = 0.0f64;
    let mut prev = 0.0f64;
    let mut start = 0usize;
    for &(end, len, voiced, vowel) in &syllables {
        for (k, r) in res.iter_mut().enumerate() {
            r.retune(voice.formants[k] * shift * vowel[k], voice.bandwidths[k], sr);
        }
        for i in start..end {
            let time = i as f64 / sr;
            let pos = (i - start) as f64 / len.max(1) as f64;
            let env = (PI * pos.min(1.0)).sin().powf(0.6);
            let inst_f0 = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * time).sin());
            phase += inst_f0 / sr;
            phase -= phase.floor();
            let pulse = if phase < voice.open_quotient {
                (PI * phase / voice.open_quotient).sin()
            } else {
                0.0
            };
            let noise: f64 = rng.gen_range(-1.0..1.0);
            let exc = if voiced {
                pulse + voice.breath * noise
            } else {
                0.3 * noise
            };
            lp = (1.0 - voice.tilt) * exc + voice.tilt * lp;
            let y: f64 = res.iter_mut().map(|r| r.step(lp)).sum();
            out.push(env * y);
        }
        start = end;
    }
    let eqd: Vec<f64> = out
        .iter()
        .map(|&x| {
            let y = x + eq * prev;
            prev = x;
            y
        })
        .collect();
    let power = eqd.iter().map(|x| x * x).sum::<f64>() / n.max(1) as f64;
    let noise_amp = (power / 10f64.powf(snr_db / 10.0) * 3.0).sqrt();
    let mut mixed: Vec<f64> = eqd
        .into_iter()
        .map(|x| x + noise_amp * rng.gen_range(-1.0..1.0))
        .collect();
    let peak = mixed.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    for x in &mut mixed {
        *x *= gain / peak;
    }
    mixed
}

/// Speaker id of the `i`-th synthetic speaker.
pub fn speaker_id(i: usize) -> String {
    format!("spk{i:03}")
}

/// Writes `num_speakers * utts_per_speaker` wavs under `out_dir/wav/` and a manifest.
///
/// The corpus is a pure function of the arguments other than `out_dir`.
pub fn gen_synthetic_corpus(
    num_speakers: usize,
    utts_per_speaker: usize,
    seconds: f64,
    seed: u64,
    out_dir: &Path,
) -> Result<Manifest> {
    if num_speakers == 0 || utts_per_speaker == 0 || !(seconds > 0.0) {
        return Err(crate::error::RecipeError::Io(format!(
            "corpus needs at least one speaker, one utterance and positive duration \
             (got {num_speakers}, {utts_per_speaker}, {seconds})"
        )));
    }
    let mut entries = Vec::new();
    for s in 0..num_speakers {
        let spk = speaker_id(s);
        let mut vrng = ChaCha8Rng::seed_from_u64(seed);
        vrng.set_stream(2 * s as u64);
        let voice = Voice::random(&mut vrng);
        let dir = out_dir.join("wav").join(&spk);
        std::fs::create_dir_all(&dir)?;
        let mut urng = ChaCha8Rng::seed_from_u64(seed);
        urng.set_stream(2 * s as u64 + 1);
        for u in 0..utts_per_speaker {
            let utt = format!("{spk}-utt{u:03}");
            let samples = synthesize(&voice, seconds, &mut urng);
            let w = Waveform::new(samples, CORPUS_SAMPLE_RATE)?;
            let path = dir.join(format!("{utt}.wav"));
            save_waveform(&path, &w)?;
            entries.push(ManifestEntry {
                utt_id: utt,
                speaker_id: spk.clone(),
                path,
                duration: w.duration_seconds(),
            });
        }
    }
    let m = Manifest::new(entries);
    m.write(out_dir.join("manifest.txt"))?;
    Ok(m)
}
