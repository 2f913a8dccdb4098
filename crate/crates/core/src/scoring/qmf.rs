use crate::error::{Error, Result};

/// Number of quality features per trial.
pub const QMF_FEATURES: usize = 7;

/// Per-trial inputs: raw score, log enrollment and test durations, enrollment
/// and test embedding norms, enrollment and test mean cohort scores.
pub type QualityFeatures = [f64; QMF_FEATURES];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QmfConfig {
    pub l2: f64,
    pub learning_rate: f64,
    pub iterations: usize,
}

impl Default for QmfConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            learning_rate: 0.5,
            iterations: 2000,
        }
    }
}

/// Logistic calibration `w·f + b` on raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct QmfModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl QmfModel {
    pub fn to_text(&self) -> String {
        let w: Vec<String> = self.weights.iter().map(|v| format!("{v:.17e}")).collect();
        format!("weights={}\nbias={:.17e}\n", w.join(","), self.bias)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut weights = None;
        let mut bias = None;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number {s:?}")));
        for line in text.lines() {
            match line.split_once('=') {
                Some(("weights", v)) => weights = Some(v.split(',').map(num).collect::<Result<Vec<_>>>()?),
                Some(("bias", v)) => bias = Some(num(v)?),
                _ => {}
            }
        }
        match (weights, bias) {
            (Some(weights), Some(bias)) => Ok(Self { weights, bias }),
            _ => Err(Error::Parse("quality model needs weights= and bias= lines".into())),
        }
    }
}

/// Fits logistic regression by full-batch gradient descent with an L2 penalty.
///
/// Features are standardized on the dev set while fitting and the scaling is
/// folded back into the returned weights; constant features get weight zero.
pub fn fit_qmf(features: &[QualityFeatures], is_target: &[bool], cfg: QmfConfig) -> Result<QmfModel> {
    if features.len() != is_target.len() {
        return Err(Error::Shape {
            op: "fit_qmf",
            detail: format!("{} feature rows for {} labels", features.len(), is_target.len()),
        });
    }
    let n_pos = is_target.iter().filter(|&&t| t).count();
    if n_pos == 0 || n_pos == is_target.len() {
        return Err(Error::SingleClass(format!(
            "{n_pos} target of {} dev trials",
            is_target.len()
        )));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quality features".into()));
    }
    let n = features.len() as f64;
    let mut mean = [0.0; QMF_FEATURES];
    let mut sd = [0.0; QMF_FEATURES];
    for f in features {
        for k in 0..QMF_FEATURES {
            mean[k] += f[k] / n;
        }
    }
    for f in features {
        for k in 0..QMF_FEATURES {
            sd[k] += (f[k] - mean[k]).powi(2) / n;
        }
    }
    let active: Vec<bool> = sd.iter().map(|&v| v.sqrt() > 1e-12).collect();
    for (s, &a) in sd.iter_mut().zip(&active) {
        *s = if a { s.sqrt() } else { 1.0 };
    }
    let z: Vec<[f64; QMF_FEATURES]> = features
        .iter()
        .map(|f| {
            let mut r = [0.0; QMF_FEATURES];
            for k in 0..QMF_FEATURES {
                r[k] = if active[k] { (f[k] - mean[k]) / sd[k] } else { 0.0 };
            }
            r
        })
        .collect();
    let mut w = [0.0; QMF_FEATURES];
    let mut b = 0.0;
    for _ in 0..cfg.iterations {
        let mut gw = [0.0; QMF_FEATURES];
        let mut gb = 0.0;
        for (x, &y) in z.iter().zip(is_target) {
            let logit = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-logit).exp());
            let err = p - if y { 1.0 } else { 0.0 };
            for k in 0..QMF_FEATURES {
                gw[k] += err * x[k] / n;
            }
            gb += err / n;
        }
        for k in 0..QMF_FEATURES {
            w[k] -= cfg.learning_rate * (gw[k] + cfg.l2 * w[k]);
        }
        b -= cfg.learning_rate * gb;
    }
    let mut weights = vec![0.0; QMF_FEATURES];
    let mut bias = b;
    for k in 0..QMF_FEATURES {
        if active[k] {
            weights[k] = w[k] / sd[k];
            bias -= w[k] * mean[k] / sd[k];
        }
    }
    Ok(QmfModel { weights, bias })
}

/// Calibrated log-odds `w·f + b` per trial.
pub fn qmf_apply(model: &QmfModel, features: &[QualityFeatures]) -> Result<Vec<f64>> {
    if model.weights.len() != QMF_FEATURES {
        return Err(Error::DimMismatch {
            expected: QMF_FEATURES,
            got: model.weights.len(),
        });
    }
    if !model.bias.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("quality model".into()));
    }
    Ok(features
        .iter()
        .map(|f| model.bias + f.iter().zip(&model.weights).map(|(a, w)| a * w).sum::<f64>())
        .collect())
}
