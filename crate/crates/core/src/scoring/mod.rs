//! Trial scoring, score normalization and calibration, detection metrics.

mod metrics;
mod norm;
mod qmf;

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::extractor::SpeakerEmbedding;
use crate::Scalar;

pub use metrics::{eer, min_dcf, operating_points, sasv_eer, DcfParams, OperatingPoint};
pub use norm::{as_norm_score, top_n_stats, AsNormConfig};
pub use qmf::{fit_qmf, qmf_apply, QmfConfig, QmfModel, QualityFeatures, QMF_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrialLabel {
    Target,
    Nontarget,
    Spoof,
}

impl fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrialLabel::Target => "1",
            TrialLabel::Nontarget => "0",
            TrialLabel::Spoof => "spoof",
        })
    }
}

impl FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(TrialLabel::Target),
            "0" => Ok(TrialLabel::Nontarget),
            "spoof" => Ok(TrialLabel::Spoof),
            other => Err(Error::Parse(format!("trial label {other:?} is not 1, 0 or spoof"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub label: TrialLabel,
}

/// Parses `label enroll_utt test_utt` lines.
pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let [label, enroll, test] = f[..] else {
                return Err(Error::Parse(format!("trial line {}: expected 3 fields", i + 1)));
            };
            Ok(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                label: label.parse()?,
            })
        })
        .collect()
}

pub fn format_trials(trials: &[Trial]) -> String {
    let mut s = String::new();
    for t in trials {
        let _ = writeln!(s, "{} {} {}", t.label, t.enroll, t.test);
    }
    s
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<Vec<Trial>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    parse_trials(&text)
}

/// Utterance id to embedding.
pub type EmbeddingTable<T> = BTreeMap<String, SpeakerEmbedding<T>>;

/// One `utt_id v1 v2 ...` line per embedding, values in round-trip precision.
pub fn format_embeddings<T: Scalar>(table: &EmbeddingTable<T>) -> String {
    let mut s = String::new();
    for (utt, e) in table {
        s.push_str(utt);
        for v in e.as_slice() {
            let _ = write!(s, " {:e}", v.as_f64());
        }
        s.push('\n');
    }
    s
}

pub fn parse_embeddings<T: Scalar>(text: &str) -> Result<EmbeddingTable<T>> {
    let mut table = EmbeddingTable::new();
    for (i, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        let Some(utt) = it.next() else { continue };
        let v = it
            .map(|x| {
                x.parse::<f64>()
                    .map(T::of)
                    .map_err(|_| Error::Parse(format!("embedding line {}: bad value {x:?}", i + 1)))
            })
            .collect::<Result<Vec<T>>>()?;
        if table.insert(utt.to_string(), SpeakerEmbedding::new(v)).is_some() {
            return Err(Error::DuplicateUtterance(utt.to_string()));
        }
    }
    Ok(table)
}

pub fn cosine_score<T: Scalar>(a: &SpeakerEmbedding<T>, b: &SpeakerEmbedding<T>) -> Result<T> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::ZeroVector("scored embedding"));
    }
    let dot = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
    Ok((dot / (na * nb)).max(-T::one()).min(T::one()))
}

fn lookup<'a, T>(table: &'a EmbeddingTable<T>, utt: &str) -> Result<&'a SpeakerEmbedding<T>> {
    table
        .get(utt)
        .ok_or_else(|| Error::MissingUtterance(utt.to_string()))
}

/// Cosine score of every trial, in trial order.
pub fn score_trials<T: Scalar>(table: &EmbeddingTable<T>, trials: &[Trial]) -> Result<Vec<T>> {
    trials
        .iter()
        .map(|t| cosine_score(lookup(table, &t.enroll)?, lookup(table, &t.test)?))
        .collect()
}

/// Scores of `utt` against every cohort embedding, memoized per utterance.
struct CohortScores<'a, T: Scalar> {
    table: &'a EmbeddingTable<T>,
    cohort: &'a [SpeakerEmbedding<T>],
    cache: BTreeMap<String, Vec<T>>,
}

impl<'a, T: Scalar> CohortScores<'a, T> {
    fn get(&mut self, utt: &str) -> Result<&[T]> {
        if !self.cache.contains_key(utt) {
            let e = lookup(self.table, utt)?;
            let s = self
                .cohort
                .iter()
                .map(|c| cosine_score(e, c))
                .collect::<Result<Vec<T>>>()?;
            self.cache.insert(utt.to_string(), s);
        }
        Ok(&self.cache[utt])
    }
}

/// AS-norm of `raw` scores against `cohort`.
pub fn as_norm<T: Scalar>(
    raw: &[T],
    table: &EmbeddingTable<T>,
    trials: &[Trial],
    cohort: &[SpeakerEmbedding<T>],
    cfg: AsNormConfig,
) -> Result<Vec<f64>> {
    if raw.len() != trials.len() {
        return Err(Error::Shape {
            op: "as_norm",
            detail: format!("{} scores for {} trials", raw.len(), trials.len()),
        });
    }
    let mut cs = CohortScores {
        table,
        cohort,
        cache: BTreeMap::new(),
    };
    raw.iter()
        .zip(trials)
        .map(|(&s, t)| {
            let e = cs.get(&t.enroll)?.to_vec();
            let te = cs.get(&t.test)?;
            as_norm_score(s, &e, te, cfg)
        })
        .collect()
}

/// Quality features of every trial given utterance durations in seconds.
pub fn quality_features<T: Scalar>(
    raw: &[T],
    table: &EmbeddingTable<T>,
    trials: &[Trial],
    durations: &BTreeMap<String, f64>,
    cohort: &[SpeakerEmbedding<T>],
) -> Result<Vec<QualityFeatures>> {
    let mut cs = CohortScores {
        table,
        cohort,
        cache: BTreeMap::new(),
    };
    let dur = |u: &str| -> Result<f64> {
        let d = *durations
            .get(u)
            .ok_or_else(|| Error::MissingUtterance(u.to_string()))?;
        Ok(d.max(1e-3).ln())
    };
    let mut mean_cohort = |u: &str| -> Result<f64> {
        let s = cs.get(u)?;
        if s.is_empty() {
            return Ok(0.0);
        }
        Ok(s.iter().map(|v| v.as_f64()).sum::<f64>() / s.len() as f64)
    };
    raw.iter()
        .zip(trials)
        .map(|(&s, t)| {
            Ok([
                s.as_f64(),
                dur(&t.enroll)?,
                dur(&t.test)?,
                lookup(table, &t.enroll)?.norm().as_f64(),
                lookup(table, &t.test)?.norm().as_f64(),
                mean_cohort(&t.enroll)?,
                mean_cohort(&t.test)?,
            ])
        })
        .collect()
}

/// `enroll test score` lines with six decimals.
pub fn format_scores<T: Scalar>(trials: &[Trial], scores: &[T]) -> String {
    let mut s = String::new();
    for (t, v) in trials.iter().zip(scores) {
        let _ = writeln!(s, "{} {} {:.6}", t.enroll, t.test, v.as_f64());
    }
    s
}

/// Parses a score file back into `(enroll, test, score)` rows.
pub fn parse_scores(text: &str) -> Result<Vec<(String, String, f64)>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let [e, t, s] = f[..] else {
                return Err(Error::Parse(format!("score line {l:?}: expected 3 fields")));
            };
            let v = s.parse().map_err(|_| Error::Parse(format!("bad score {s:?}")))?;
            Ok((e.to_string(), t.to_string(), v))
        })
        .collect()
}

/// Metric report: summary text, `key=value` lines and an operating-point table.
pub fn metrics_report(scores: &[f64], labels: &[TrialLabel], dcf: DcfParams) -> Result<String> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "metrics",
            detail: format!("{} scores for {} trials", scores.len(), labels.len()),
        });
    }
    let (s, l): (Vec<f64>, Vec<bool>) = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != TrialLabel::Spoof)
        .map(|(&s, &l)| (s, l == TrialLabel::Target))
        .unzip();
    let e = eer(&s, &l)?;
    let d = min_dcf(&s, &l, dcf)?;
    let n_tgt = l.iter().filter(|&&x| x).count();
    let mut out = format!(
        "trials: {} target, {} nontarget\nEER: {:.4}%\nminDCF(p_target={}, c_miss={}, c_fa={}): {:.4}\n",
        n_tgt,
        l.len() - n_tgt,
        100.0 * e,
        dcf.p_target,
        dcf.c_miss,
        dcf.c_fa,
        d
    );
    let has_spoof = labels.contains(&TrialLabel::Spoof);
    let sasv = if has_spoof { Some(sasv_eer(scores, labels)?) } else { None };
    if let Some(v) = sasv {
        let _ = writeln!(out, "SASV-EER: {:.4}%", 100.0 * v);
    }
    let _ = writeln!(out, "eer={e:.6}");
    let _ = writeln!(out, "mindcf={d:.6}");
    if let Some(v) = sasv {
        let _ = writeln!(out, "sasv_eer={v:.6}");
    }
    out.push_str("# threshold far frr\n");
    for p in operating_points(&s, &l)? {
        let _ = writeln!(out, "{:.6} {:.6} {:.6}", p.threshold, p.far, p.frr);
    }
    Ok(out)
}

/// Reads `key=value` lines of a metric report.
pub fn parse_metric_keys(text: &str) -> BTreeMap<String, f64> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .filter_map(|(k, v)| Some((k.trim().to_string(), v.trim().parse().ok()?)))
        .collect()
}
