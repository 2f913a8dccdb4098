//! Parameterized building blocks shared by front-ends, encoders and projectors.

use std::fmt;

use rand::Rng;

use crate::dsp::{hz_to_mel, mel_to_hz};
use crate::error::{Error, Result};
use crate::Scalar;

use super::graph::ConvParams;
use super::{Graph, ParamId, ParamStore, Tensor, Unary, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: the tape, bound parameters and pending buffer updates.
pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub vars: &'a [Var],
    pub mode: Mode,
    /// New values for non-trainable buffers produced in training mode.
    pub updates: Vec<(ParamId, Tensor<T>)>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, vars: &'a [Var], mode: Mode) -> Self {
        Self {
            g,
            store,
            vars,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.index()]
    }

    fn checked(&self, id: ParamId) -> Result<Var> {
        let p = self.store.get(id);
        if !self.g.value(self.var(id)).is_finite() {
            return Err(Error::NonFinite(format!("parameter {}", p.name)));
        }
        Ok(self.var(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear,
    Conv1d,
    BatchNorm,
    LayerNorm,
    Relu,
    Sigmoid,
    Softmax,
    SincConv,
    SqueezeExcite,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Linear => "linear",
            LayerKind::Conv1d => "conv1d",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::LayerNorm => "layer_norm",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
            LayerKind::SincConv => "sinc_conv",
            LayerKind::SqueezeExcite => "squeeze_excite",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SincSpec {
    pub n_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub sample_rate: u32,
    pub min_low_hz: f64,
    pub min_band_hz: f64,
}

impl Default for SincSpec {
    fn default() -> Self {
        Self {
            n_filters: 40,
            kernel: 251,
            stride: 160,
            sample_rate: 16000,
            min_low_hz: 50.0,
            min_band_hz: 50.0,
        }
    }
}

/// One layer with handles into a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `[n, in] -> [n, out]`.
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
        in_dim: usize,
        out_dim: usize,
    },
    /// `[b, in, t] -> [b, out, t']`.
    Conv1d {
        weight: ParamId,
        bias: Option<ParamId>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        params: ConvParams,
    },
    /// Normalizes axis 1 of `[b, c]` or `[b, c, t]`.
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    /// Normalizes across axis 1 per position.
    LayerNorm {
        gamma: ParamId,
        beta: ParamId,
        channels: usize,
        eps: f64,
    },
    Relu,
    Sigmoid,
    /// Softmax across axis 1.
    Softmax,
    /// Learnable band-pass filterbank over raw audio `[b, 1, samples]`.
    SincConv {
        low_hz: ParamId,
        band_hz: ParamId,
        spec: SincSpec,
    },
    /// Channel re-weighting from time-averaged context.
    SqueezeExcite {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
        channels: usize,
        bottleneck: usize,
    },
}

fn uniform<T: Scalar>(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches count")
}

/// `[1, c]` or `[1, c, 1, ...]` so a per-channel vector broadcasts over axis 1.
fn channel_shape(rank: usize, c: usize) -> Vec<usize> {
    let mut s = vec![1; rank.max(2)];
    s[1] = c;
    s
}

impl Layer {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Linear { .. } => LayerKind::Linear,
            Layer::Conv1d { .. } => LayerKind::Conv1d,
            Layer::BatchNorm { .. } => LayerKind::BatchNorm,
            Layer::LayerNorm { .. } => LayerKind::LayerNorm,
            Layer::Relu => LayerKind::Relu,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::Softmax => LayerKind::Softmax,
            Layer::SincConv { .. } => LayerKind::SincConv,
            Layer::SqueezeExcite { .. } => LayerKind::SqueezeExcite,
        }
    }

    pub fn linear<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_dim, in_dim], bound),
            true,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform(rng, &[out_dim], bound), true)?)
        } else {
            None
        };
        Ok(Layer::Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        params: ConvParams,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if params.groups == 0 || in_ch % params.groups != 0 || out_ch % params.groups != 0 {
            return Err(Error::Config(format!(
                "{name}: {in_ch}->{out_ch} channels not divisible into {} groups",
                params.groups
            )));
        }
        let fan_in = in_ch / params.groups * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, &[out_ch, in_ch / params.groups, kernel], bound),
            true,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform(rng, &[out_ch], bound), true)?)
        } else {
            None
        };
        Ok(Layer::Conv1d {
            weight,
            bias,
            in_ch,
            out_ch,
            kernel,
            params,
        })
    }

    pub fn batch_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Layer::BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(&[channels], T::one()),
                false,
            )?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn layer_norm<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Layer::LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], T::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), true)?,
            channels,
            eps: 1e-5,
        })
    }

    /// Sinc filterbank with cut-offs initialized on the mel scale.
    pub fn sinc_conv<T: Scalar>(store: &mut ParamStore<T>, name: &str, spec: SincSpec) -> Result<Self> {
        if spec.kernel % 2 == 0 || spec.n_filters == 0 || spec.stride == 0 {
            return Err(Error::Config(
                "sinc_conv needs an odd kernel and positive filter count and stride".into(),
            ));
        }
        let nyquist = f64::from(spec.sample_rate) / 2.0;
        let (lo, hi) = sinc_init_range(&spec);
        let (mlo, mhi) = (hz_to_mel(lo), hz_to_mel(hi));
        let edges: Vec<f64> = (0..=spec.n_filters)
            .map(|i| mel_to_hz(mlo + (mhi - mlo) * i as f64 / spec.n_filters as f64))
            .collect();
        if hi <= lo || hi > nyquist {
            return Err(Error::Config("sinc_conv kernel too short for the sample rate".into()));
        }
        let low: Vec<T> = edges[..spec.n_filters]
            .iter()
            .map(|&e| T::of(e - spec.min_low_hz))
            .collect();
        let band: Vec<T> = edges
            .windows(2)
            .map(|w| T::of((w[1] - w[0] - spec.min_band_hz).abs()))
            .collect();
        Ok(Layer::SincConv {
            low_hz: store.add(format!("{name}.low_hz"), Tensor::from_vec(low), true)?,
            band_hz: store.add(format!("{name}.band_hz"), Tensor::from_vec(band), true)?,
            spec,
        })
    }

    pub fn squeeze_excite<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        bottleneck: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (bottleneck as f64).sqrt();
        Ok(Layer::SqueezeExcite {
            w1: store.add(format!("{name}.w1"), uniform(rng, &[bottleneck, channels], b1), true)?,
            b1: store.add(format!("{name}.b1"), uniform(rng, &[bottleneck], b1), true)?,
            w2: store.add(format!("{name}.w2"), uniform(rng, &[channels, bottleneck], b2), true)?,
            b2: store.add(format!("{name}.b2"), uniform(rng, &[channels], b2), true)?,
            channels,
            bottleneck,
        })
    }

    /// Output size along axis 1 for input size `dim`, or an error if incompatible.
    pub fn output_dim(&self, dim: usize) -> Result<usize> {
        let mismatch = |expected: usize| Error::Shape {
            op: "layer",
            detail: format!("{} expects {expected} input channels, got {dim}", self.kind()),
        };
        match self {
            Layer::Linear { in_dim, out_dim, .. } => {
                if *in_dim != dim {
                    return Err(mismatch(*in_dim));
                }
                Ok(*out_dim)
            }
            Layer::Conv1d { in_ch, out_ch, .. } => {
                if *in_ch != dim {
                    return Err(mismatch(*in_ch));
                }
                Ok(*out_ch)
            }
            Layer::BatchNorm { channels, .. }
            | Layer::LayerNorm { channels, .. }
            | Layer::SqueezeExcite { channels, .. } => {
                if *channels != dim {
                    return Err(mismatch(*channels));
                }
                Ok(dim)
            }
            Layer::SincConv { spec, .. } => {
                if dim != 1 {
                    return Err(mismatch(1));
                }
                Ok(spec.n_filters)
            }
            Layer::Relu | Layer::Sigmoid | Layer::Softmax => Ok(dim),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let shape = cx.g.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape {
                op: "layer",
                detail: format!("{} input {shape:?} lacks batch and channel axes", self.kind()),
            });
        }
        self.output_dim(shape[1])?;
        match self {
            Layer::Linear { weight, bias, .. } => {
                if shape.len() != 2 {
                    return Err(Error::Shape {
                        op: "linear",
                        detail: format!("expects [batch, features], got {shape:?}"),
                    });
                }
                let w = cx.checked(*weight)?;
                let y = cx.g.matmul_t(x, w)?;
                match bias {
                    Some(b) => {
                        let b = cx.checked(*b)?;
                        cx.g.add(y, b)
                    }
                    None => Ok(y),
                }
            }
            Layer::Conv1d {
                weight,
                bias,
                out_ch,
                params,
                ..
            } => {
                let w = cx.checked(*weight)?;
                let y = cx.g.conv1d(x, w, *params)?;
                match bias {
                    Some(b) => {
                        let b = cx.checked(*b)?;
                        let b = cx.g.reshape(b, &[1, *out_ch, 1])?;
                        cx.g.add(y, b)
                    }
                    None => Ok(y),
                }
            }
            Layer::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
                channels,
                eps,
                momentum,
            } => {
                let (gm, bt) = (cx.checked(*gamma)?, cx.checked(*beta)?);
                let cshape = channel_shape(shape.len(), *channels);
                match cx.mode {
                    Mode::Train => {
                        let (y, mean, var) = cx.g.batch_norm_train(x, gm, bt, T::of(*eps))?;
                        let m = T::of(*momentum);
                        let keep = T::one() - m;
                        let old_mean = cx.store.get(*running_mean).value.data();
                        let old_var = cx.store.get(*running_var).value.data();
                        let new_mean = old_mean.iter().zip(&mean).map(|(&o, &b)| keep * o + m * b);
                        let new_var = old_var.iter().zip(&var).map(|(&o, &b)| keep * o + m * b);
                        cx.updates
                            .push((*running_mean, Tensor::from_vec(new_mean.collect())));
                        cx.updates
                            .push((*running_var, Tensor::from_vec(new_var.collect())));
                        Ok(y)
                    }
                    Mode::Eval => {
                        let rm = cx.checked(*running_mean)?;
                        let rv = cx.checked(*running_var)?;
                        let v = cx.g.unary(rv, Unary::AddScalar(T::of(*eps)));
                        let sd = cx.g.unary(v, Unary::Sqrt);
                        let inv = cx.g.unary(sd, Unary::Recip);
                        let k = cx.g.mul(gm, inv)?;
                        let k = cx.g.reshape(k, &cshape)?;
                        let rm = cx.g.reshape(rm, &cshape)?;
                        let bt = cx.g.reshape(bt, &cshape)?;
                        let c = cx.g.sub(x, rm)?;
                        let y = cx.g.mul(c, k)?;
                        cx.g.add(y, bt)
                    }
                }
            }
            Layer::LayerNorm {
                gamma,
                beta,
                channels,
                eps,
            } => {
                let (gm, bt) = (cx.checked(*gamma)?, cx.checked(*beta)?);
                let cshape = channel_shape(shape.len(), *channels);
                let mu = cx.g.mean_axis(x, 1)?;
                let c = cx.g.sub(x, mu)?;
                let sq = cx.g.unary(c, Unary::Square);
                let var = cx.g.mean_axis(sq, 1)?;
                let v = cx.g.unary(var, Unary::AddScalar(T::of(*eps)));
                let sd = cx.g.unary(v, Unary::Sqrt);
                let inv = cx.g.unary(sd, Unary::Recip);
                let xh = cx.g.mul(c, inv)?;
                let gm = cx.g.reshape(gm, &cshape)?;
                let bt = cx.g.reshape(bt, &cshape)?;
                let y = cx.g.mul(xh, gm)?;
                cx.g.add(y, bt)
            }
            Layer::Relu => Ok(cx.g.relu(x)),
            Layer::Sigmoid => Ok(cx.g.sigmoid(x)),
            Layer::Softmax => cx.g.softmax(x, 1),
            Layer::SincConv {
                low_hz,
                band_hz,
                spec,
            } => {
                let (lo, bd) = (cx.checked(*low_hz)?, cx.checked(*band_hz)?);
                let filters = sinc_filters(cx.g, lo, bd, spec)?;
                let filters = cx.g.reshape(filters, &[spec.n_filters, 1, spec.kernel])?;
                cx.g.conv1d(
                    x,
                    filters,
                    ConvParams {
                        stride: spec.stride,
                        dilation: 1,
                        padding: spec.kernel / 2,
                        groups: 1,
                    },
                )
            }
            Layer::SqueezeExcite {
                w1,
                b1,
                w2,
                b2,
                channels,
                ..
            } => {
                if shape.len() != 3 {
                    return Err(Error::Shape {
                        op: "squeeze_excite",
                        detail: format!("expects [batch, channels, time], got {shape:?}"),
                    });
                }
                let (w1, b1, w2, b2) = (
                    cx.checked(*w1)?,
                    cx.checked(*b1)?,
                    cx.checked(*w2)?,
                    cx.checked(*b2)?,
                );
                let s = cx.g.mean_axis(x, 2)?;
                let s = cx.g.reshape(s, &[shape[0], *channels])?;
                let h = cx.g.matmul_t(s, w1)?;
                let h = cx.g.add(h, b1)?;
                let h = cx.g.relu(h);
                let z = cx.g.matmul_t(h, w2)?;
                let z = cx.g.add(z, b2)?;
                let z = cx.g.sigmoid(z);
                let z = cx.g.reshape(z, &[shape[0], *channels, 1])?;
                cx.g.mul(x, z)
            }
        }
    }
}

/// Frequency span used to initialize the filterbank: above the kernel's
/// transition band at the low end and below Nyquist by the same margin.
fn sinc_init_range(spec: &SincSpec) -> (f64, f64) {
    let sr = f64::from(spec.sample_rate);
    // Hamming transition width is about 3.3 / kernel of the sample rate
    let margin = 4.0 * sr / spec.kernel as f64;
    (margin.max(spec.min_low_hz), sr / 2.0 - margin)
}

/// Builds normalized Hamming-windowed band-pass taps `[n_filters, kernel]`.
///
/// Cut-offs: `f1 = min_low + |low|`, `f2 = min(f1 + min_band + |band|, nyquist)`.
/// Each filter is scaled so its centre tap is one.
pub fn sinc_filters<T: Scalar>(g: &mut Graph<T>, low: Var, band: Var, spec: &SincSpec) -> Result<Var> {
    let k = spec.kernel;
    let half = (k / 2) as f64;
    let sr = f64::from(spec.sample_rate);
    let nyquist = sr / 2.0;
    let (min_low, min_band) = (spec.min_low_hz, spec.min_band_hz);
    let pi = std::f64::consts::PI;
    g.row_pair(low, band, k, move |_, lo, bd| {
        let (lo, bd) = (lo.as_f64(), bd.as_f64());
        let f1 = min_low + lo.abs();
        let raw_f2 = f1 + min_band + bd.abs();
        let clamped = raw_f2 > nyquist;
        let f2 = raw_f2.min(nyquist);
        let width = f2 - f1;
        let (s_lo, s_bd) = (lo.signum(), bd.signum());
        let mut vals = Vec::with_capacity(k);
        let mut d_lo = Vec::with_capacity(k);
        let mut d_bd = Vec::with_capacity(k);
        for i in 0..k {
            let n = i as f64 - half;
            let w = 0.54 - 0.46 * (2.0 * pi * i as f64 / (k - 1) as f64).cos();
            if n == 0.0 {
                vals.push(T::of(w));
                d_lo.push(T::zero());
                d_bd.push(T::zero());
                continue;
            }
            let (a1, a2) = (2.0 * pi * f1 / sr * n, 2.0 * pi * f2 / sr * n);
            // unwindowed, normalized tap
            let g0 = (a2.sin() - a1.sin()) / (pi * n) * sr / (2.0 * width);
            let dg_df2 = (a2.cos() - g0) / width;
            let dg_df1 = (g0 - a1.cos()) / width;
            let df2_dlo = if clamped { 0.0 } else { s_lo };
            let df2_dbd = if clamped { 0.0 } else { s_bd };
            vals.push(T::of(w * g0));
            d_lo.push(T::of(w * (dg_df1 * s_lo + dg_df2 * df2_dlo)));
            d_bd.push(T::of(w * dg_df2 * df2_dbd));
        }
        (vals, d_lo, d_bd)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(layer: &Layer, store: &ParamStore<f64>, x: Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let xv = g.constant(x);
        let mut cx = Ctx::new(&mut g, store, &vars, mode);
        let y = layer.forward(&mut cx, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn relu_values() {
        let store = ParamStore::new();
        let x = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(run(&Layer::Relu, &store, x, Mode::Eval).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn identity_linear() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Layer::linear(&mut store, "fc", 3, 3, true, &mut rng).unwrap();
        let Layer::Linear { weight, bias, .. } = &l else { unreachable!() };
        *store.value_mut(*weight) =
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        *store.value_mut(bias.unwrap()) = Tensor::zeros(&[3]);
        let x = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(run(&l, &store, x.clone(), Mode::Eval), x);
    }

    #[test]
    fn unit_kernel_conv_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Layer::conv1d(&mut store, "c", 2, 2, 1, ConvParams::same(1, 1), false, &mut rng)
            .unwrap();
        let Layer::Conv1d { weight, .. } = &l else { unreachable!() };
        *store.value_mut(*weight) = Tensor::new(vec![2, 2, 1], vec![1., 0., 0., 1.]).unwrap();
        let x = Tensor::new(vec![1, 2, 4], vec![1., 2., 3., 4., -1., -2., -3., -4.]).unwrap();
        assert_eq!(run(&l, &store, x.clone(), Mode::Eval), x);
    }

    #[test]
    fn dilated_difference_on_ramp() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = ConvParams {
            stride: 1,
            dilation: 2,
            padding: 0,
            groups: 1,
        };
        let l = Layer::conv1d(&mut store, "c", 1, 1, 3, p, false, &mut rng).unwrap();
        let Layer::Conv1d { weight, .. } = &l else { unreachable!() };
        *store.value_mut(*weight) = Tensor::new(vec![1, 1, 3], vec![1., 0., -1.]).unwrap();
        let ramp: Vec<f64> = (0..10).map(|i| 2.0 * i as f64 + 1.0).collect();
        let y = run(&l, &store, Tensor::new(vec![1, 1, 10], ramp.clone()).unwrap(), Mode::Eval);
        // direct convolution oracle: y[t] = x[t] - x[t + 4]
        let oracle: Vec<f64> = (0..6).map(|t| ramp[t] - ramp[t + 4]).collect();
        assert_eq!(y.data(), &oracle[..]);
        assert!(y.data().iter().all(|&v| v == -8.0));
    }

    #[test]
    fn batch_norm_eval_identity_statistics() {
        let mut store = ParamStore::new();
        let l = Layer::batch_norm(&mut store, "bn", 2).unwrap();
        let Layer::BatchNorm { running_var, eps, .. } = &l else { unreachable!() };
        *store.value_mut(*running_var) = Tensor::full(&[2], 1.0 - eps);
        let x = Tensor::new(vec![2, 2], vec![0.3, -1.2, 4.0, 0.0]).unwrap();
        let once = run(&l, &store, x.clone(), Mode::Eval);
        let twice = run(&l, &store, once.clone(), Mode::Eval);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in once.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_train_updates_running_stats() {
        let mut store = ParamStore::new();
        let l = Layer::batch_norm(&mut store, "bn", 1).unwrap();
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let x = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let mut cx = Ctx::new(&mut g, &store, &vars, Mode::Train);
        let y = l.forward(&mut cx, x).unwrap();
        let updates = std::mem::take(&mut cx.updates);
        assert_eq!(updates.len(), 2);
        assert!((updates[0].1.data()[0] - 0.25f64).abs() < 1e-12);
        // unbiased variance 5/3
        assert!((updates[1].1.data()[0] - (0.9 + 0.1 * 5.0 / 3.0f64)).abs() < 1e-12);
        assert!(g.value(y).data().iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn nan_parameter_rejected() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = Layer::linear(&mut store, "fc", 2, 2, false, &mut rng).unwrap();
        let Layer::Linear { weight, .. } = &l else { unreachable!() };
        store.value_mut(*weight).data_mut()[0] = f64::NAN;
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let x = g.constant(Tensor::zeros(&[1, 2]));
        let mut cx = Ctx::new(&mut g, &store, &vars, Mode::Eval);
        assert!(matches!(l.forward(&mut cx, x), Err(Error::NonFinite(_))));
        let bad = g.constant(Tensor::zeros(&[1, 3]));
        let mut cx = Ctx::new(&mut g, &store, &vars, Mode::Eval);
        assert!(matches!(l.forward(&mut cx, bad), Err(Error::Shape { .. })));
    }

    fn response_db(taps: &[f64], freq: f64, sr: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &h) in taps.iter().enumerate() {
            let ph = 2.0 * std::f64::consts::PI * freq * n as f64 / sr;
            re += h * ph.cos();
            im -= h * ph.sin();
        }
        10.0 * (re * re + im * im).log10()
    }

    #[test]
    fn sinc_filters_are_band_pass() {
        let mut store = ParamStore::<f64>::new();
        let spec = SincSpec::default();
        let l = Layer::sinc_conv(&mut store, "sinc", spec.clone()).unwrap();
        let Layer::SincConv { low_hz, band_hz, .. } = &l else { unreachable!() };
        let mut g = Graph::new();
        let lo = g.constant(store.get(*low_hz).value.clone());
        let bd = g.constant(store.get(*band_hz).value.clone());
        let f = sinc_filters(&mut g, lo, bd, &spec).unwrap();
        let sr = f64::from(spec.sample_rate);
        for taps in g.value(f).data().chunks(spec.kernel) {
            let peak = (0..800)
                .map(|i| response_db(taps, i as f64 * sr / 1600.0, sr))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(response_db(taps, 0.0, sr) < peak - 20.0);
            assert!(response_db(taps, sr / 2.0, sr) < peak - 20.0);
        }
    }
}
