//! Dataset statistics, batching, optimization and checkpointing.

mod manifest;
mod optim;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{load_waveform, Waveform};
use crate::error::{Error, Result};
use crate::extractor::{stack, Extractor, ExtractorConfig, ExtractorInput};
use crate::nn::{Ctx, Graph, Mode, ParamStore, Tensor};
use crate::objectives::{loss_graph, normalize_rows, ClassWeights, LossConfig};
use crate::Scalar;

pub use manifest::{compute_stats, DatasetStats, Manifest, ManifestEntry};
pub use optim::{lr_at, Adam, AdamConfig, Schedule};

/// Name of the classification head inside a checkpoint.
pub const HEAD_PARAM: &str = "head.weight";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub crop_seconds: f64,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    /// `num_classes` is overwritten from the manifest's speaker set.
    pub loss: LossConfig,
    pub extractor: ExtractorConfig,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            seed: 0,
            crop_seconds: 2.0,
            adam: AdamConfig::default(),
            schedule: Schedule::default(),
            loss: LossConfig::default(),
            extractor: ExtractorConfig::default(),
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if !(self.crop_seconds > 0.0) {
            return Err(Error::Config("crop_seconds must be positive".into()));
        }
        self.schedule.validate()?;
        self.extractor.validate()
    }
}

/// One training batch: manifest row indices and dense labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub utt_ids: Vec<String>,
    pub labels: Vec<usize>,
}

/// Endless, seed-deterministic stream of batches reshuffled every epoch.
/// Each epoch yields `floor(n / batch_size)` full batches.
#[derive(Debug, Clone)]
pub struct Batches<'a> {
    manifest: &'a Manifest,
    labels: Vec<usize>,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos + self.batch_size > self.order.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.epoch);
            self.order = (0..self.manifest.len()).collect();
            self.order.shuffle(&mut rng);
            self.epoch += 1;
            self.pos = 0;
        }
        let rows = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        Some(Batch {
            utt_ids: rows.iter().map(|&r| self.manifest.entries[r].utt_id.clone()).collect(),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            rows,
        })
    }
}

pub fn make_batches<'a>(m: &'a Manifest, batch_size: usize, seed: u64) -> Result<Batches<'a>> {
    m.validate()?;
    let map = m.label_map();
    if map.len() < 2 {
        return Err(Error::Manifest(format!("need at least 2 speakers, got {}", map.len())));
    }
    if batch_size == 0 || batch_size > m.len() {
        return Err(Error::Config(format!(
            "batch_size {batch_size} exceeds the corpus size {}",
            m.len()
        )));
    }
    Ok(Batches {
        manifest: m,
        labels: m.entries.iter().map(|e| map[&e.speaker_id]).collect(),
        batch_size,
        seed,
        epoch: 0,
        order: Vec::new(),
        pos: 0,
    })
}

/// Trained parameters (extractor plus [`HEAD_PARAM`]) and run metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub step: usize,
    pub config_hash: String,
    /// Training loss of every step taken so far.
    pub losses: Vec<f64>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Writes `<stem>.params` and the `<stem>.meta` sidecar.
    pub fn save(&self, stem: &Path) -> Result<()> {
        self.params.save(stem.with_extension("params"))?;
        std::fs::write(stem.with_extension("meta"), self.meta_text())?;
        Ok(())
    }

    pub fn meta_text(&self) -> String {
        let losses: Vec<String> = self.losses.iter().map(|l| format!("{l:.17e}")).collect();
        format!(
            "step={}\nconfig_hash={}\nlosses={}\n",
            self.step,
            self.config_hash,
            losses.join(",")
        )
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let params = ParamStore::load(stem.with_extension("params"))?;
        let meta_path = stem.with_extension("meta");
        let text = std::fs::read_to_string(&meta_path).map_err(|_| Error::MissingFile(meta_path))?;
        let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
        let field = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Parse(format!("checkpoint metadata lacks {k}")))
        };
        let step = field("step")?
            .parse()
            .map_err(|_| Error::Parse("bad checkpoint step".into()))?;
        let losses = field("losses")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| Error::Parse(format!("bad loss {s:?}"))))
            .collect::<Result<_>>()?;
        Ok(Self {
            params,
            step,
            config_hash: field("config_hash")?.to_string(),
            losses,
        })
    }

    /// Extractor parameters only.
    pub fn extractor_params(&self) -> ParamStore<T> {
        self.params.filtered(|n| n != HEAD_PARAM)
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Where periodic checkpoints go; `None` keeps them in memory only.
    pub checkpoint_dir: Option<PathBuf>,
    pub config_hash: String,
}

/// Cuts a `[dim, len]` input to `target` columns at a random offset, tiling short inputs.
pub fn crop_columns<T: Scalar>(x: &Tensor<T>, target: usize, rng: &mut impl Rng) -> Tensor<T> {
    let (dim, len) = (x.shape()[0], x.shape()[1]);
    let offset = if len > target { rng.gen_range(0..=len - target) } else { 0 };
    let mut data = Vec::with_capacity(dim * target);
    for row in x.data().chunks(len) {
        data.extend(row.iter().cycle().skip(offset).take(target));
    }
    Tensor::new(vec![dim, target], data).expect("count matches")
}

fn load_inputs<T: Scalar>(ex: &Extractor<T>, m: &Manifest) -> Result<Vec<Tensor<T>>> {
    m.entries
        .iter()
        .map(|e| {
            let input = if e.path.extension().is_some_and(|x| x == "spkf") {
                ExtractorInput::FeatureFile(e.path.clone())
            } else {
                let w: Waveform<T> = load_waveform(&e.path)?;
                ExtractorInput::Wave(w)
            };
            ex.raw_input(&input)
        })
        .collect()
}

/// Runs `cfg.steps` Adam updates of the extractor and class weights.
pub fn train<T: Scalar>(cfg: &TrainConfig, m: &Manifest, opts: &TrainOptions) -> Result<Checkpoint<T>> {
    cfg.validate()?;
    let mut batches = make_batches(m, cfg.batch_size, cfg.seed)?;
    let ex = Extractor::<T>::build(&cfg.extractor, cfg.seed)?;
    let loss_cfg = LossConfig {
        num_classes: m.label_map().len(),
        ..cfg.loss.clone()
    };
    loss_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let head = ClassWeights::<T>::random(
        loss_cfg.num_classes,
        loss_cfg.subcenters,
        cfg.extractor.embed_dim,
        &mut rng,
    );
    let inputs = load_inputs(&ex, m)?;
    let crop = ex.input_len(cfg.crop_seconds);
    let mut store = ex.params().clone();
    let head_id = store.add(HEAD_PARAM, head.into_tensor(), true)?;
    let trainable = store.trainable_ids();
    let shapes: Vec<Vec<usize>> = trainable
        .iter()
        .map(|&id| store.get(id).value.shape().to_vec())
        .collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut adam = Adam::new(cfg.adam, &shape_refs);
    let mut losses = Vec::with_capacity(cfg.steps);
    let save = |store: &ParamStore<T>, step: usize, losses: &[f64], tag: &str| -> Result<()> {
        if let Some(dir) = &opts.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            Checkpoint {
                params: store.clone(),
                step,
                config_hash: opts.config_hash.clone(),
                losses: losses.to_vec(),
            }
            .save(&dir.join(tag))?;
        }
        Ok(())
    };

    for step in 0..cfg.steps {
        let batch = batches.next().expect("endless stream");
        let x: Vec<Tensor<T>> = batch
            .rows
            .iter()
            .map(|&r| ex.normalize_input(crop_columns(&inputs[r], crop, &mut rng)))
            .collect();
        let x = stack(&x)?;
        let mut g = Graph::new();
        let vars = store.bind(&mut g);
        let forward = |g: &mut Graph<T>| -> Result<_> {
            let mut cx = Ctx::new(g, &store, &vars, Mode::Train);
            let xv = cx.g.constant(x);
            let emb = ex.forward(&mut cx, xv)?;
            let hv = cx.var(head_id);
            let l = loss_graph(cx.g, emb, hv, &batch.labels, &loss_cfg)?;
            Ok((l, std::mem::take(&mut cx.updates)))
        };
        let (loss_var, updates) = match forward(&mut g) {
            Err(Error::NonFinite(_) | Error::ZeroVector(_)) => {
                return Err(Error::Diverged { step, loss: f64::NAN })
            }
            other => other?,
        };
        let loss = g.value(loss_var).item().as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        let mut grads = g.backward(loss_var)?;
        let grads: Vec<Tensor<T>> = trainable
            .iter()
            .zip(&shapes)
            .map(|(&id, s)| grads.take(vars[id.index()], s))
            .collect::<Result<_>>()?;
        drop(g);
        let lr = lr_at(step, &cfg.schedule);
        adam.step(&mut store.trainable_values_mut(), &grads, lr)?;
        for (id, value) in updates {
            *store.value_mut(id) = value;
        }
        let dim = cfg.extractor.embed_dim;
        normalize_rows(store.value_mut(head_id).data_mut(), dim);
        if store.check_finite().is_err() {
            return Err(Error::Diverged { step, loss });
        }
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.steps {
            save(&store, done, &losses, &format!("step_{done:06}"))?;
        }
    }
    save(&store, cfg.steps, &losses, "final")?;
    Ok(Checkpoint {
        params: store,
        step: cfg.steps,
        config_hash: opts.config_hash.clone(),
        losses,
    })
}
