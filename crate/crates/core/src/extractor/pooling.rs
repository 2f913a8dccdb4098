use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ConvParams, Ctx, Layer, ParamStore, Unary, Var};
use crate::Scalar;

use super::config::{ExtractorConfig, PoolingKind};

/// Lower bound on the pooled variance before the square root.
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// Temporal pooling `[b, c, t] -> [b, c]` or `[b, 2c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooling {
    kind: PoolingKind,
    channels: usize,
    /// Scoring network: `conv1x1(c -> hidden)`, tanh, `conv1x1(hidden -> 1)` without bias.
    attention: Option<(Layer, Layer)>,
}

impl Pooling {
    pub fn build<T: Scalar>(
        cfg: &ExtractorConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let c = cfg.encoder_dim();
        let attention = if cfg.pooling == PoolingKind::AttentiveStats {
            let h = cfg.attention_hidden;
            let p = ConvParams::same(1, 1);
            Some((
                Layer::conv1d(store, "pooling.attn_hidden", c, h, 1, p, true, rng)?,
                Layer::conv1d(store, "pooling.attn_score", h, 1, 1, p, false, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            kind: cfg.pooling,
            channels: c,
            attention,
        })
    }

    pub fn kind(&self) -> PoolingKind {
        self.kind
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            PoolingKind::Mean => self.channels,
            PoolingKind::Stats | PoolingKind::AttentiveStats => 2 * self.channels,
        }
    }

    /// Attention weights `[b, 1, t]`; `None` for unweighted pooling.
    pub fn attention_weights<T: Scalar>(&self, cx: &mut Ctx<'_, T>, h: Var) -> Result<Option<Var>> {
        let Some((hidden, score)) = &self.attention else {
            return Ok(None);
        };
        let e = hidden.forward(cx, h)?;
        let e = cx.g.tanh(e);
        let e = score.forward(cx, e)?;
        Ok(Some(cx.g.softmax(e, 2)?))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, h: Var) -> Result<Var> {
        let shape = cx.g.shape(h).to_vec();
        if shape.len() != 3 || shape[1] != self.channels || shape[2] == 0 {
            return Err(Error::Shape {
                op: "pooling",
                detail: format!("expects [batch, {}, frames>0], got {shape:?}", self.channels),
            });
        }
        let b = shape[0];
        let (mu, second) = match self.attention_weights(cx, h)? {
            None => {
                let mu = cx.g.mean_axis(h, 2)?;
                if self.kind == PoolingKind::Mean {
                    return cx.g.reshape(mu, &[b, self.channels]);
                }
                let c = cx.g.sub(h, mu)?;
                let sq = cx.g.unary(c, Unary::Square);
                (mu, cx.g.mean_axis(sq, 2)?)
            }
            Some(alpha) => {
                let wh = cx.g.mul(h, alpha)?;
                let mu = cx.g.sum_axis(wh, 2)?;
                let sq = cx.g.unary(h, Unary::Square);
                let wsq = cx.g.mul(sq, alpha)?;
                let m2 = cx.g.sum_axis(wsq, 2)?;
                let mu2 = cx.g.unary(mu, Unary::Square);
                (mu, cx.g.sub(m2, mu2)?)
            }
        };
        let var = cx.g.unary(second, Unary::ClampMin(T::of(VARIANCE_FLOOR)));
        let sigma = cx.g.unary(var, Unary::Sqrt);
        let y = cx.g.concat(&[mu, sigma], 1)?;
        cx.g.reshape(y, &[b, 2 * self.channels])
    }
}
