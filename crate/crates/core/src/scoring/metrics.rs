use crate::error::{Error, Result};
use crate::Scalar;

use super::TrialLabel;

/// Detection cost parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

/// One threshold with its miss and false-alarm rates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub frr: f64,
    pub far: f64,
}

/// Operating points at `-inf`, every midpoint between adjacent distinct scores, and `+inf`.
/// `frr = P(target < θ)`, `far = P(nontarget ≥ θ)`.
pub fn operating_points<T: Scalar>(scores: &[T], is_target: &[bool]) -> Result<Vec<OperatingPoint>> {
    if scores.len() != is_target.len() {
        return Err(Error::Shape {
            op: "metrics",
            detail: format!("{} scores for {} labels", scores.len(), is_target.len()),
        });
    }
    let mut pairs: Vec<(f64, bool)> = scores.iter().map(|s| s.as_f64()).zip(is_target.iter().copied()).collect();
    if pairs.iter().any(|p| !p.0.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!("{n_pos} target and {n_neg} nontarget trials")));
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (np, nn) = (n_pos as f64, n_neg as f64);
    let mut points = vec![OperatingPoint {
        threshold: f64::NEG_INFINITY,
        frr: 0.0,
        far: 1.0,
    }];
    let (mut pos_below, mut neg_below) = (0usize, 0usize);
    let mut i = 0;
    while i < pairs.len() {
        let s = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == s {
            if pairs[i].1 {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
        let threshold = if i < pairs.len() {
            0.5 * (s + pairs[i].0)
        } else {
            f64::INFINITY
        };
        points.push(OperatingPoint {
            threshold,
            frr: pos_below as f64 / np,
            far: (n_neg - neg_below) as f64 / nn,
        });
    }
    Ok(points)
}

fn eer_from_points(points: &[OperatingPoint]) -> f64 {
    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.frr - a.far, b.frr - b.far);
        if db >= 0.0 {
            let t = -da / (db - da);
            return a.frr + t * (b.frr - a.frr);
        }
    }
    unreachable!("the last operating point has frr = 1 and far = 0")
}

/// Equal error rate by linear interpolation between operating points.
pub fn eer<T: Scalar>(scores: &[T], is_target: &[bool]) -> Result<f64> {
    Ok(eer_from_points(&operating_points(scores, is_target)?))
}

/// Minimum detection cost normalized by the cheaper trivial system.
pub fn min_dcf<T: Scalar>(scores: &[T], is_target: &[bool], p: DcfParams) -> Result<f64> {
    if !(p.p_target > 0.0 && p.p_target < 1.0 && p.c_miss > 0.0 && p.c_fa > 0.0) {
        return Err(Error::Config(format!("invalid detection cost parameters {p:?}")));
    }
    let (wm, wf) = (p.c_miss * p.p_target, p.c_fa * (1.0 - p.p_target));
    let best = operating_points(scores, is_target)?
        .iter()
        .map(|o| wm * o.frr + wf * o.far)
        .fold(f64::INFINITY, f64::min);
    Ok(best / wm.min(wf))
}

/// EER with spoof trials pooled into the negatives.
pub fn sasv_eer<T: Scalar>(scores: &[T], labels: &[TrialLabel]) -> Result<f64> {
    if !labels.contains(&TrialLabel::Target) {
        return Err(Error::SingleClass("no target trials".into()));
    }
    let pos: Vec<bool> = labels.iter().map(|&l| l == TrialLabel::Target).collect();
    eer(scores, &pos)
}
