use rand::Rng;

use crate::error::Result;
use crate::nn::{ConvParams, Ctx, Layer, ParamStore, Var};
use crate::Scalar;

use super::config::{EncoderKind, ExtractorConfig};

/// `(kernel, dilation)` of the five TDNN layers.
const TDNN_LAYERS: [(usize, usize); 5] = [(5, 1), (3, 2), (3, 3), (1, 1), (1, 1)];
const ECAPA_DILATIONS: [usize; 3] = [2, 3, 4];

/// Frame-level encoder `[b, in, t] -> [b, channels, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    kind: EncoderKind,
    stem: Vec<Layer>,
    /// Residual squeeze-excite blocks; outputs are also concatenated for `fuse`.
    blocks: Vec<Vec<Layer>>,
    fuse: Vec<Layer>,
}

fn conv_unit<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    dilation: usize,
    norm: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Layer>> {
    let p = ConvParams::same(kernel, dilation);
    let mut v = vec![
        Layer::conv1d(store, &format!("{name}.conv"), in_ch, out_ch, kernel, p, true, rng)?,
        Layer::Relu,
    ];
    if norm {
        v.push(Layer::batch_norm(store, &format!("{name}.bn"), out_ch)?);
    }
    Ok(v)
}

impl Encoder {
    pub fn build<T: Scalar>(
        cfg: &ExtractorConfig,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (fin, c) = (cfg.frontend_dim(), cfg.channels);
        let mut enc = Encoder {
            kind: cfg.encoder,
            stem: Vec::new(),
            blocks: Vec::new(),
            fuse: Vec::new(),
        };
        match cfg.encoder {
            EncoderKind::Identity => {}
            EncoderKind::Tdnn => {
                let mut dim = fin;
                for (i, &(k, d)) in TDNN_LAYERS.iter().enumerate() {
                    let name = format!("encoder.tdnn{i}");
                    enc.stem
                        .extend(conv_unit(store, &name, dim, c, k, d, cfg.tdnn_post_norm, rng)?);
                    dim = c;
                }
            }
            EncoderKind::EcapaLite => {
                enc.stem = conv_unit(store, "encoder.stem", fin, c, 5, 1, true, rng)?;
                for (j, &d) in ECAPA_DILATIONS.iter().enumerate() {
                    let name = format!("encoder.block{j}");
                    let mut b = conv_unit(store, &format!("{name}.in"), c, c, 1, 1, true, rng)?;
                    b.extend(conv_unit(store, &format!("{name}.mid"), c, c, 3, d, true, rng)?);
                    b.extend(conv_unit(store, &format!("{name}.out"), c, c, 1, 1, true, rng)?);
                    b.push(Layer::squeeze_excite(
                        store,
                        &format!("{name}.se"),
                        c,
                        cfg.se_bottleneck,
                        rng,
                    )?);
                    enc.blocks.push(b);
                }
                let n = ECAPA_DILATIONS.len() * c;
                enc.fuse = conv_unit(store, "encoder.fuse", n, c, 1, 1, false, rng)?;
            }
        }
        Ok(enc)
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        for l in &self.stem {
            h = l.forward(cx, h)?;
        }
        if self.blocks.is_empty() {
            return Ok(h);
        }
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let mut y = h;
            for l in block {
                y = l.forward(cx, y)?;
            }
            h = cx.g.add(y, h)?;
            outs.push(h);
        }
        let mut y = cx.g.concat(&outs, 1)?;
        for l in &self.fuse {
            y = l.forward(cx, y)?;
        }
        Ok(y)
    }
}
