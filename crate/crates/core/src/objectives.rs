//! Margin-based classification objectives over cosine logits.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Graph, Tensor, Var};
use crate::Scalar;

/// Smallest `sin θ` used in derivatives near `cos θ = ±1`.
const MIN_SINE: f64 = 1e-6;

/// AAM-softmax with sub-centers and an inter top-k hard-negative penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub scale: f64,
    /// Additive angular margin on the target class, radians.
    pub margin: f64,
    pub subcenters: usize,
    /// Number of hardest non-target classes receiving the inter margin.
    pub topk: usize,
    pub inter_margin: f64,
    pub num_classes: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            scale: 30.0,
            margin: 0.2,
            subcenters: 3,
            topk: 5,
            inter_margin: 0.1,
            num_classes: 2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.scale > 0.0) {
            return fail(format!("loss scale must be positive, got {}", self.scale));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return fail(format!("margin must lie in [0, pi/2), got {}", self.margin));
        }
        if !(self.inter_margin >= 0.0) {
            return fail(format!("inter margin must be non-negative, got {}", self.inter_margin));
        }
        if self.subcenters == 0 {
            return fail("subcenters must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.topk >= self.num_classes {
            return fail(format!(
                "topk {} must be below the class count {}",
                self.topk, self.num_classes
            ));
        }
        Ok(())
    }
}

/// Class sub-center directions `[classes, subcenters, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights<T> {
    tensor: Tensor<T>,
}

impl<T: Scalar> ClassWeights<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        if tensor.shape().len() != 3 || tensor.numel() == 0 {
            return Err(Error::Shape {
                op: "class weights",
                detail: format!("expects [classes, subcenters, dim], got {:?}", tensor.shape()),
            });
        }
        Ok(Self { tensor })
    }

    /// Random unit rows.
    pub fn random(classes: usize, subcenters: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut data: Vec<T> = (0..classes * subcenters * dim)
            .map(|_| T::of(rng.gen_range(-1.0..1.0)))
            .collect();
        normalize_rows(&mut data, dim);
        Self {
            tensor: Tensor::new(vec![classes, subcenters, dim], data).expect("count matches"),
        }
    }

    pub fn classes(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn subcenters(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    fn row(&self, j: usize, k: usize) -> &[T] {
        let d = self.dim();
        let start = (j * self.subcenters() + k) * d;
        &self.tensor.data()[start..start + d]
    }
}

/// Rescales each length-`dim` row of `data` to unit norm; zero rows are left alone.
pub fn normalize_rows<T: Scalar>(data: &mut [T], dim: usize) {
    for row in data.chunks_mut(dim) {
        let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
        if n > T::zero() {
            row.iter_mut().for_each(|v| *v = *v / n);
        }
    }
}

fn norm<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt()
}

/// `cos θ_j`: the best cosine between `e` and any sub-center of class `j`.
pub fn subcenter_cosines<T: Scalar>(e: &[T], w: &ClassWeights<T>) -> Result<Vec<T>> {
    if e.len() != w.dim() {
        return Err(Error::DimMismatch {
            expected: w.dim(),
            got: e.len(),
        });
    }
    let ne = norm(e);
    if ne == T::zero() {
        return Err(Error::ZeroVector("embedding"));
    }
    (0..w.classes())
        .map(|j| {
            let mut best = T::neg_infinity();
            for k in 0..w.subcenters() {
                let r = w.row(j, k);
                let nr = norm(r);
                if nr == T::zero() {
                    return Err(Error::ZeroVector("class weight row"));
                }
                let dot = e.iter().zip(r).fold(T::zero(), |a, (&x, &y)| a + x * y);
                let c = (dot / (ne * nr)).max(-T::one()).min(T::one());
                best = best.max(c);
            }
            Ok(best)
        })
        .collect()
}

/// Target logit value and derivative with respect to `cos θ_y`.
fn margin_target(c: f64, s: f64, m: f64) -> (f64, f64) {
    let (cm, sm) = (m.cos(), m.sin());
    if c > -cm {
        let sin = (1.0 - c * c).max(0.0).sqrt();
        (s * (c * cm - sin * sm), s * (cm + c * sm / sin.max(MIN_SINE)))
    } else {
        (s * (c - m * sm), s)
    }
}

/// Hard-negative logit `s·cos(θ − m_inter)` and its derivative.
fn margin_inter(c: f64, s: f64, mi: f64) -> (f64, f64) {
    let sin = (1.0 - c * c).max(0.0).sqrt();
    let (cm, sm) = (mi.cos(), mi.sin());
    (s * (c * cm + sin * sm), s * (cm - c * sm / sin.max(MIN_SINE)))
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

/// Scaled cosine logits with the additive angular margin on `label`.
pub fn aam_logits<T: Scalar>(cosines: &[T], label: usize, cfg: &LossConfig) -> Result<Vec<T>> {
    check_label(label, cosines.len())?;
    Ok(cosines
        .iter()
        .enumerate()
        .map(|(j, &c)| {
            if j == label {
                T::of(margin_target(c.as_f64(), cfg.scale, cfg.margin).0)
            } else {
                T::of(cfg.scale) * c
            }
        })
        .collect())
}

/// Indices of the `k` highest non-target cosines, ties to the lower index.
pub fn hardest_negatives<T: Scalar>(cosines: &[T], label: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..cosines.len()).filter(|&j| j != label).collect();
    idx.sort_by(|&a, &b| {
        cosines[b]
            .partial_cmp(&cosines[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Raises the logits of the `k` hardest non-target classes to `s·cos(θ_j − m_inter)`.
pub fn inter_topk_adjust<T: Scalar>(
    logits: &[T],
    cosines: &[T],
    label: usize,
    cfg: &LossConfig,
) -> Vec<T> {
    let mut out = logits.to_vec();
    if cfg.inter_margin == 0.0 {
        return out;
    }
    for j in hardest_negatives(cosines, label, cfg.topk) {
        out[j] = T::of(margin_inter(cosines[j].as_f64(), cfg.scale, cfg.inter_margin).0);
    }
    out
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> Result<T> {
    check_label(label, logits.len())?;
    let mx = logits.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
    let lse = logits.iter().fold(T::zero(), |a, &v| a + (v - mx).exp()).ln() + mx;
    Ok(lse - logits[label])
}

/// Mean loss over rows of `embeddings` (`[batch, dim]`, row-major).
pub fn loss<T: Scalar>(
    embeddings: &[T],
    labels: &[usize],
    w: &ClassWeights<T>,
    cfg: &LossConfig,
) -> Result<T> {
    if labels.is_empty() || embeddings.len() != labels.len() * w.dim() {
        return Err(Error::Shape {
            op: "loss",
            detail: format!(
                "{} embedding values for {} labels of dim {}",
                embeddings.len(),
                labels.len(),
                w.dim()
            ),
        });
    }
    let mut total = T::zero();
    for (e, &y) in embeddings.chunks(w.dim()).zip(labels) {
        let cos = subcenter_cosines(e, w)?;
        let logits = aam_logits(&cos, y, cfg)?;
        let logits = inter_topk_adjust(&logits, &cos, y, cfg);
        total = total + cross_entropy(&logits, y)?;
    }
    Ok(total / T::of_usize(labels.len()))
}

/// Differentiable [`loss`]: `emb` is `[batch, dim]`, `w` is `[classes, subcenters, dim]`.
pub fn loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    emb: Var,
    w: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    let es = g.shape(emb).to_vec();
    if ws.len() != 3 || es.len() != 2 || es[1] != ws[2] || es[0] != labels.len() {
        return Err(Error::Shape {
            op: "loss",
            detail: format!("embeddings {es:?}, weights {ws:?}, {} labels", labels.len()),
        });
    }
    let (b, c, k) = (es[0], ws[0], ws[1]);
    for &y in labels {
        check_label(y, c)?;
    }
    let en = g.l2_normalize(emb)?;
    let wf = g.reshape(w, &[c * k, ws[2]])?;
    let wn = g.l2_normalize(wf)?;
    let cos = g.matmul_t(en, wn)?;
    let cos = if k > 1 {
        let r = g.reshape(cos, &[b, c, k])?;
        let m = g.max_axis(r, 2)?;
        g.reshape(m, &[b, c])?
    } else {
        cos
    };
    // 0 = plain, 1 = target margin, 2 = inter margin
    let mut role = vec![0u8; b * c];
    let values = g.value(cos).data().to_vec();
    for (i, &y) in labels.iter().enumerate() {
        role[i * c + y] = 1;
        if cfg.inter_margin != 0.0 {
            for j in hardest_negatives(&values[i * c..(i + 1) * c], y, cfg.topk) {
                role[i * c + j] = 2;
            }
        }
    }
    let (s, m, mi) = (cfg.scale, cfg.margin, cfg.inter_margin);
    let logits = g.pointwise(cos, move |i, v| {
        let v = v.as_f64().clamp(-1.0, 1.0);
        let (y, d) = match role[i] {
            1 => margin_target(v, s, m),
            2 => margin_inter(v, s, mi),
            _ => (s * v, s),
        };
        (T::of(y), T::of(d))
    });
    g.cross_entropy(logits, labels)
}
