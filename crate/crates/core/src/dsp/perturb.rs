//! Resampling-style speed perturbation and the speaker relabeling rule.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::Scalar;

use super::Waveform;

/// Zero crossings of the interpolation kernel on each side.
const ZERO_CROSSINGS: usize = 16;
const KAISER_BETA: f64 = 8.6;

/// Exact rational speed factor. Values above 1 speed audio up (shorter, higher pitch).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpeedFactor(Ratio<u32>);

impl SpeedFactor {
    pub const ONE: SpeedFactor = SpeedFactor(Ratio::new_raw(1, 1));

    /// Builds `numer / denom`, rejecting values outside (0.5, 2.0).
    pub fn new(numer: u32, denom: u32) -> Result<Self> {
        if denom == 0 {
            return Err(Error::FactorOutOfRange(format!("{numer}/0")));
        }
        let r = Ratio::new(numer, denom);
        let f = Self(r);
        // 0.5 < n/d < 2  <=>  d < 2n and n < 2d
        let (n, d) = (u64::from(*r.numer()), u64::from(*r.denom()));
        if !(d < 2 * n && n < 2 * d) {
            return Err(Error::FactorOutOfRange(f.to_string()));
        }
        Ok(f)
    }

    pub fn numer(&self) -> u32 {
        *self.0.numer()
    }

    pub fn denom(&self) -> u32 {
        *self.0.denom()
    }

    pub fn as_f64(&self) -> f64 {
        f64::from(self.numer()) / f64::from(self.denom())
    }

    pub fn is_one(&self) -> bool {
        self.numer() == self.denom()
    }
}

impl fmt::Display for SpeedFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.denom() == 1 {
            return write!(f, "{}.0", self.numer());
        }
        let mut d = self.denom();
        while d % 2 == 0 {
            d /= 2;
        }
        while d % 5 == 0 {
            d /= 5;
        }
        // terminating decimals print as such, anything else as n/d
        if d == 1 {
            write!(f, "{}", self.as_f64())
        } else {
            write!(f, "{}/{}", self.numer(), self.denom())
        }
    }
}

impl FromStr for SpeedFactor {
    type Err = Error;

    /// Accepts decimal (`0.9`) or fraction (`9/10`) notation.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Parse(format!("invalid speed factor {s:?}"));
        if let Some((n, d)) = s.split_once('/') {
            let n = n.trim().parse::<u32>().map_err(|_| bad())?;
            let d = d.trim().parse::<u32>().map_err(|_| bad())?;
            return Self::new(n, d);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 6 {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let n = digits.parse::<u32>().map_err(|_| bad())?;
        Self::new(n, 10u32.pow(frac.len() as u32))
    }
}

/// Which speed factors are applied and whether each perturbed copy is a new speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbLabelRule {
    pub factors: Vec<SpeedFactor>,
    pub relabel: bool,
}

impl PerturbLabelRule {
    pub fn new(factors: Vec<SpeedFactor>, relabel: bool) -> Result<Self> {
        if !factors.contains(&SpeedFactor::ONE) {
            return Err(Error::InvalidRule("factor 1.0 must be included".into()));
        }
        let mut sorted = factors.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != factors.len() {
            return Err(Error::InvalidRule("duplicate factors".into()));
        }
        Ok(Self { factors, relabel })
    }
}

impl Default for PerturbLabelRule {
    fn default() -> Self {
        Self {
            factors: vec![
                SpeedFactor::new(9, 10).unwrap(),
                SpeedFactor::ONE,
                SpeedFactor::new(11, 10).unwrap(),
            ],
            relabel: true,
        }
    }
}

/// Maps a speaker seen through speed factor `factor` to its training identity.
///
/// Factor 1.0 keeps the id; other factors yield `"{id}#sp{factor}"` when the rule relabels.
pub fn relabel_speaker(
    speaker_id: &str,
    factor: SpeedFactor,
    rule: &PerturbLabelRule,
) -> Result<String> {
    if speaker_id.is_empty() || speaker_id.contains('#') || speaker_id.contains(char::is_whitespace)
    {
        return Err(Error::InvalidSpeakerId(speaker_id.to_string()));
    }
    if !rule.factors.contains(&factor) {
        return Err(Error::FactorNotInRule {
            factor: factor.to_string(),
            allowed: rule
                .factors
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(", "),
        });
    }
    if factor.is_one() || !rule.relabel {
        Ok(speaker_id.to_string())
    } else {
        Ok(format!("{speaker_id}#sp{factor}"))
    }
}

/// Largest factor denominator for which kernel taps are tabulated.
const MAX_TABLE_PHASES: u64 = 4096;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Resamples so that playback at the original rate runs `factor` times faster.
///
/// Pitch and tempo both scale by `factor`; the output keeps the input sample rate and
/// has `round(len / factor)` samples. Uses a Kaiser-windowed sinc kernel.
pub fn speed_perturb<T: Scalar>(w: &Waveform<T>, factor: SpeedFactor) -> Result<Waveform<T>> {
    let factor = SpeedFactor::new(factor.numer(), factor.denom())?;
    if factor.is_one() {
        return Ok(w.clone());
    }
    let (p, q) = (u64::from(factor.numer()), u64::from(factor.denom()));
    let len = w.samples.len() as u64;
    // round(len * q / p), halves rounded up
    let out_len = ((2 * len * q + p) / (2 * p)) as usize;

    let cutoff = (q as f64 / p as f64).min(1.0);
    let half_width = ZERO_CROSSINGS as f64 / cutoff;
    let i0_beta = bessel_i0(KAISER_BETA);
    let kernel = |x: f64| -> f64 {
        let r = x / half_width;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / i0_beta;
        let arg = std::f64::consts::PI * cutoff * x;
        let sinc = if arg.abs() < 1e-12 { 1.0 } else { arg.sin() / arg };
        cutoff * sinc * window
    };

    let samples: Vec<f64> = w.samples.iter().map(|s| s.as_f64()).collect();
    let n = samples.len() as i64;
    let reach = half_width.ceil() as i64;
    let taps = (2 * reach + 2) as usize;
    // one row of taps per fractional phase j * p mod q
    let table: Option<Vec<Vec<f64>>> = (q <= MAX_TABLE_PHASES).then(|| {
        (0..q)
            .map(|r| {
                let frac = r as f64 / q as f64;
                (0..taps as i64)
                    .map(|k| kernel((reach - k) as f64 + frac))
                    .collect()
            })
            .collect()
    });
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len as u64 {
        // exact input position t = j * p / q
        let base = (j * p / q) as i64;
        let phase = j * p % q;
        let lo = (base - reach).max(0);
        let hi = (base + reach + 1).min(n - 1);
        let mut acc = 0.0;
        match &table {
            Some(t) => {
                let row = &t[phase as usize];
                for i in lo..=hi {
                    acc += samples[i as usize] * row[(i - base + reach) as usize];
                }
            }
            None => {
                let frac = phase as f64 / q as f64;
                for i in lo..=hi {
                    acc += samples[i as usize] * kernel((base - i) as f64 + frac);
                }
            }
        }
        out.push(T::of(acc));
    }
    Waveform::new(out, w.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f(s: &str) -> SpeedFactor {
        s.parse().unwrap()
    }

    #[test]
    fn factor_parsing_and_display() {
        assert_eq!(f("0.9"), SpeedFactor::new(9, 10).unwrap());
        assert_eq!(f("9/10"), f("0.90"));
        assert_eq!(f("1.1").to_string(), "1.1");
        assert_eq!(f("1").to_string(), "1.0");
        assert_eq!(f("2/3").to_string(), "2/3");
        assert!("2.5".parse::<SpeedFactor>().is_err());
        assert!("0.5".parse::<SpeedFactor>().is_err());
        assert!("abc".parse::<SpeedFactor>().is_err());
    }

    #[test]
    fn identity_factor_is_bit_identical() {
        let w = Waveform::new(vec![0.1f64, -0.3, 0.7, 0.2], 16000).unwrap();
        assert_eq!(speed_perturb(&w, SpeedFactor::ONE).unwrap(), w);
    }

    #[test]
    fn out_of_range_factor() {
        let w = Waveform::new(vec![0.0f64; 10], 16000).unwrap();
        let r = SpeedFactor(Ratio::new(5, 2));
        assert!(matches!(
            speed_perturb(&w, r),
            Err(Error::FactorOutOfRange(_))
        ));
    }

    #[test]
    fn slowdown_length() {
        let w = Waveform::new(vec![0.0f64; 16000], 16000).unwrap();
        let out = speed_perturb(&w, f("0.9")).unwrap();
        assert!((out.len() as i64 - 17778).abs() <= 1);
        assert_eq!(out.sample_rate, 16000);
    }

    #[test]
    fn relabel_rule() {
        let rule = PerturbLabelRule::default();
        assert_eq!(relabel_speaker("spk1", SpeedFactor::ONE, &rule).unwrap(), "spk1");
        assert_eq!(relabel_speaker("spk1", f("0.9"), &rule).unwrap(), "spk1#sp0.9");
        assert_ne!(
            relabel_speaker("spk1", f("0.9"), &rule).unwrap(),
            relabel_speaker("spk1", f("1.1"), &rule).unwrap()
        );
        assert!(matches!(
            relabel_speaker("spk1", f("1.2"), &rule),
            Err(Error::FactorNotInRule { .. })
        ));
        assert!(relabel_speaker("a#b", SpeedFactor::ONE, &rule).is_err());
        let keep = PerturbLabelRule::new(rule.factors.clone(), false).unwrap();
        assert_eq!(relabel_speaker("spk1", f("0.9"), &keep).unwrap(), "spk1");
    }

    #[test]
    fn rule_requires_unity() {
        assert!(PerturbLabelRule::new(vec![f("0.9")], true).is_err());
    }
}
