use crate::error::{Error, Result};
use crate::Scalar;

/// Adaptive score normalization settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AsNormConfig {
    pub top_n: usize,
}

/// Mean and sample standard deviation of the `top_n` highest scores.
pub fn top_n_stats<T: Scalar>(cohort_scores: &[T], top_n: usize) -> Result<(f64, f64)> {
    if top_n < 2 || top_n > cohort_scores.len() {
        return Err(Error::Config(format!(
            "top_n {top_n} must lie in [2, {}]",
            cohort_scores.len()
        )));
    }
    let mut v: Vec<f64> = cohort_scores.iter().map(|s| s.as_f64()).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    v.truncate(top_n);
    let n = top_n as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if !(sd >= 1e-12) {
        return Err(Error::DegenerateCohort(sd));
    }
    Ok((mean, sd))
}

/// `½[(s − μ_e)/σ_e + (s − μ_t)/σ_t]` over the top-N cohort scores of each side.
pub fn as_norm_score<T: Scalar>(
    raw: T,
    enroll_cohort: &[T],
    test_cohort: &[T],
    cfg: AsNormConfig,
) -> Result<f64> {
    let (me, se) = top_n_stats(enroll_cohort, cfg.top_n)?;
    let (mt, st) = top_n_stats(test_cohort, cfg.top_n)?;
    let s = raw.as_f64();
    Ok(0.5 * ((s - me) / se + (s - mt) / st))
}
