//! Composable speaker-embedding extractor: front-end, encoder, pooling, projector.

mod config;
mod encoder;
mod pooling;

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{read_spkf, FeatureSequence, MelExtractor, Waveform};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Graph, Layer, Mode, ParamStore, Tensor, Unary, Var};
use crate::Scalar;

pub use config::{
    format_projector, parse_projector, EncoderKind, ExtractorConfig, FrontendKind, PoolingKind,
    ProjectorLayer,
};
pub use encoder::Encoder;
pub use pooling::Pooling;

/// Offset inside the log of the rectified sinc filterbank output.
pub const SINC_LOG_OFFSET: f64 = 1e-4;

/// Fixed-dimension utterance representation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding<T> {
    vector: Vec<T>,
}

impl<T: Scalar> SpeakerEmbedding<T> {
    pub fn new(vector: Vec<T>) -> Self {
        Self { vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.vector
    }

    pub fn into_vec(self) -> Vec<T> {
        self.vector
    }

    pub fn norm(&self) -> T {
        self.vector.iter().fold(T::zero(), |a, &v| a + v * v).sqrt()
    }
}

/// What the extractor consumes.
#[derive(Debug, Clone)]
pub enum ExtractorInput<T> {
    Wave(Waveform<T>),
    Features(FeatureSequence<T>),
    FeatureFile(PathBuf),
}

#[derive(Clone)]
enum Frontend<T: Scalar> {
    Mel(MelExtractor<T>),
    Sinc(Layer),
    Precomputed,
}

/// A built extractor owning its parameters.
#[derive(Clone)]
pub struct Extractor<T: Scalar> {
    cfg: ExtractorConfig,
    store: ParamStore<T>,
    frontend: Frontend<T>,
    encoder: Encoder,
    pooling: Pooling,
    projector: Vec<Layer>,
}

impl<T: Scalar> Extractor<T> {
    /// Validates `cfg` and initializes parameters from `seed`.
    pub fn build(cfg: &ExtractorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let frontend = match cfg.frontend {
            FrontendKind::Mel => Frontend::Mel(MelExtractor::new(&cfg.mel, cfg.sample_rate)?),
            FrontendKind::SincRaw => Frontend::Sinc(Layer::sinc_conv(&mut store, "frontend.sinc", cfg.sinc.clone())?),
            FrontendKind::PrecomputedFile => Frontend::Precomputed,
        };
        let encoder = Encoder::build(cfg, &mut store, &mut rng)?;
        let pooling = Pooling::build(cfg, &mut store, &mut rng)?;
        let mut projector = Vec::new();
        let mut dim = cfg.pooled_dim();
        for (i, layer) in cfg.projector.iter().enumerate() {
            let name = format!("projector.{i}");
            let l = match *layer {
                ProjectorLayer::Linear(n) => {
                    let out = n.unwrap_or(cfg.embed_dim);
                    Layer::linear(&mut store, &name, dim, out, true, &mut rng)?
                }
                ProjectorLayer::BatchNorm => Layer::batch_norm(&mut store, &name, dim)?,
                ProjectorLayer::LayerNorm => Layer::layer_norm(&mut store, &name, dim)?,
                ProjectorLayer::Relu => Layer::Relu,
                ProjectorLayer::Sigmoid => Layer::Sigmoid,
            };
            dim = l.output_dim(dim)?;
            projector.push(l);
        }
        Ok(Self {
            cfg: cfg.clone(),
            store,
            frontend,
            encoder,
            pooling,
            projector,
        })
    }

    /// Builds the architecture of `cfg` and loads `params` into it.
    pub fn with_params(cfg: &ExtractorConfig, params: &ParamStore<T>) -> Result<Self> {
        let mut ex = Self::build(cfg, 0)?;
        ex.store.assign_from(params)?;
        Ok(ex)
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    /// Front-end output for one input, as frames by dimension.
    pub fn frontend_features(&self, input: &ExtractorInput<T>) -> Result<FeatureSequence<T>> {
        match (&self.frontend, input) {
            (Frontend::Sinc(_), _) => {
                let x = self.network_input(input)?;
                let mut g = Graph::new();
                let vars = self.store.bind(&mut g);
                let mut cx = Ctx::new(&mut g, &self.store, &vars, Mode::Eval);
                let xv = cx.g.constant(add_batch_axis(x));
                let y = self.sinc_forward(&mut cx, xv, false)?;
                let shape = cx.g.shape(y).to_vec();
                let (dim, frames) = (shape[1], shape[2]);
                let data = cx.g.value(y).data();
                let mut values = Vec::with_capacity(dim * frames);
                for t in 0..frames {
                    values.extend((0..dim).map(|d| data[d * frames + t]));
                }
                let rate = f64::from(self.cfg.sample_rate) / self.cfg.sinc.stride as f64;
                FeatureSequence::new(values, frames, dim, rate)
            }
            (Frontend::Mel(mel), ExtractorInput::Wave(w)) => {
                if w.sample_rate != self.cfg.sample_rate {
                    return Err(Error::Config(format!(
                        "waveform at {} Hz, extractor expects {} Hz",
                        w.sample_rate, self.cfg.sample_rate
                    )));
                }
                mel.compute(w)
            }
            (Frontend::Precomputed, ExtractorInput::Wave(_)) => Err(Error::Config(
                "precomputed_file front-end needs feature input, not a waveform".into(),
            )),
            (_, ExtractorInput::Features(f)) => self.check_dim(f.clone()),
            (_, ExtractorInput::FeatureFile(p)) => self.check_dim(read_spkf(p)?),
        }
    }

    fn check_dim(&self, f: FeatureSequence<T>) -> Result<FeatureSequence<T>> {
        let expected = self.cfg.frontend_dim();
        if f.dim() != expected {
            return Err(Error::DimMismatch {
                expected,
                got: f.dim(),
            });
        }
        Ok(f)
    }

    /// Per-utterance network input without the batch axis: `[1, samples]` for
    /// the sinc front-end, otherwise `[dim, frames]`.
    pub fn network_input(&self, input: &ExtractorInput<T>) -> Result<Tensor<T>> {
        Ok(self.normalize_input(self.raw_input(input)?))
    }

    /// Like [`network_input`](Self::network_input) but before time normalization.
    pub fn raw_input(&self, input: &ExtractorInput<T>) -> Result<Tensor<T>> {
        if let Frontend::Sinc(_) = self.frontend {
            let w = match input {
                ExtractorInput::Wave(w) => w,
                _ => {
                    return Err(Error::Config(
                        "sinc_raw front-end needs a waveform input".into(),
                    ))
                }
            };
            if w.sample_rate != self.cfg.sample_rate {
                return Err(Error::Config(format!(
                    "waveform at {} Hz, extractor expects {} Hz",
                    w.sample_rate, self.cfg.sample_rate
                )));
            }
            if w.samples.is_empty() {
                return Err(Error::EmptyWaveform);
            }
            return Tensor::new(vec![1, w.samples.len()], w.samples.clone());
        }
        let f = self.frontend_features(input)?;
        Tensor::new(vec![f.dim(), f.num_frames()], f.transposed())
    }

    /// Subtracts each row's mean from a `[dim, frames]` input when `feature_norm` is set.
    /// Sinc inputs are normalized after the filterbank instead.
    pub fn normalize_input(&self, mut x: Tensor<T>) -> Tensor<T> {
        if !self.cfg.feature_norm || matches!(self.frontend, Frontend::Sinc(_)) {
            return x;
        }
        let frames = x.shape()[1];
        if frames == 0 {
            return x;
        }
        for row in x.data_mut().chunks_mut(frames) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / T::of_usize(frames);
            row.iter_mut().for_each(|v| *v = *v - mean);
        }
        x
    }

    /// Length along the time axis of [`raw_input`](Self::raw_input) for `seconds` of audio.
    pub fn input_len(&self, seconds: f64) -> usize {
        let samples = (seconds * f64::from(self.cfg.sample_rate)).round() as usize;
        match self.cfg.frontend {
            FrontendKind::SincRaw => samples,
            FrontendKind::Mel => self
                .cfg
                .mel
                .num_frames(samples, self.cfg.sample_rate)
                .unwrap_or(1),
            FrontendKind::PrecomputedFile => {
                ((seconds * 1000.0 / f64::from(self.cfg.mel.hop_ms)).round() as usize).max(1)
            }
        }
    }

    fn sinc_forward(&self, cx: &mut Ctx<'_, T>, x: Var, normalize: bool) -> Result<Var> {
        let Frontend::Sinc(layer) = &self.frontend else {
            return Ok(x);
        };
        let y = layer.forward(cx, x)?;
        let y = cx.g.unary(y, Unary::Abs);
        let y = cx.g.unary(y, Unary::AddScalar(T::of(SINC_LOG_OFFSET)));
        let y = cx.g.unary(y, Unary::Ln);
        if normalize && self.cfg.feature_norm {
            let m = cx.g.mean_axis(y, 2)?;
            cx.g.sub(y, m)
        } else {
            Ok(y)
        }
    }

    /// Encoder output `[batch, channels, frames]` for a batch of network inputs.
    pub fn encode(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let feats = self.sinc_forward(cx, x, true)?;
        self.encoder.forward(cx, feats)
    }

    /// Embeddings `[batch, embed_dim]` for a batch of network inputs.
    pub fn forward(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.encode(cx, x)?;
        let mut y = self.pooling.forward(cx, h)?;
        for layer in &self.projector {
            y = layer.forward(cx, y)?;
        }
        Ok(y)
    }

    /// Embedding of one utterance in evaluation mode.
    pub fn extract(&self, input: &ExtractorInput<T>) -> Result<SpeakerEmbedding<T>> {
        let x = self.network_input(input)?;
        let mut out = self.extract_batch(&[x])?;
        Ok(out.pop().expect("one input"))
    }

    /// Embeddings of equally shaped network inputs in evaluation mode.
    pub fn extract_batch(&self, inputs: &[Tensor<T>]) -> Result<Vec<SpeakerEmbedding<T>>> {
        if inputs.is_empty() {
            return Ok(Vec::new());
        }
        let x = stack(inputs)?;
        let mut g = Graph::new();
        let vars = self.store.bind(&mut g);
        let mut cx = Ctx::new(&mut g, &self.store, &vars, Mode::Eval);
        let xv = cx.g.constant(x);
        let y = self.forward(&mut cx, xv)?;
        let v = cx.g.value(y);
        if !v.is_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(v.data()
            .chunks(self.cfg.embed_dim)
            .map(|c| SpeakerEmbedding::new(c.to_vec()))
            .collect())
    }
}

fn add_batch_axis<T: Scalar>(x: Tensor<T>) -> Tensor<T> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    x.reshaped(&shape).expect("same element count")
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = items.first().ok_or_else(|| Error::Shape {
        op: "stack",
        detail: "no tensors".into(),
    })?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::Shape {
                op: "stack",
                detail: format!("{:?} vs {:?}", t.shape(), first.shape()),
            });
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}
