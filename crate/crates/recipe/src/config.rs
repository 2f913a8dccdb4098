//! `section.key: value` recipe configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use spkforge_core::dsp::{MelConfig, PerturbLabelRule, SpeedFactor};
use spkforge_core::extractor::{format_projector, parse_projector, ExtractorConfig};
use spkforge_core::nn::SincSpec;
use spkforge_core::objectives::LossConfig;
use spkforge_core::scoring::DcfParams;
use spkforge_core::trainer::{AdamConfig, Schedule, TrainConfig};

use crate::error::{RecipeError, Result};

pub const SECTIONS: [&str; 7] = ["data", "frontend", "extractor", "loss", "trainer", "scoring", "registry"];

/// Every recognized key with its default value.
const DEFAULTS: &[(&str, &str)] = &[
    ("data.corpus_dir", ""),
    ("data.num_speakers", "20"),
    ("data.utts_per_speaker", "50"),
    ("data.seconds", "3.0"),
    ("data.seed", "0"),
    ("data.heldout_per_speaker", "10"),
    ("data.speed_factors", "0.9,1.0,1.1"),
    ("data.relabel_perturbed", "true"),
    ("data.num_target_trials", "500"),
    ("data.num_nontarget_trials", "500"),
    ("data.trial_seed", "1"),
    ("data.augment_dir", ""),
    ("frontend.kind", "mel"),
    ("frontend.sample_rate", "16000"),
    ("frontend.n_mels", "80"),
    ("frontend.window_ms", "25"),
    ("frontend.hop_ms", "10"),
    ("frontend.fft_size", "512"),
    ("frontend.log_floor", "1e-10"),
    ("frontend.feature_norm", "true"),
    ("frontend.feature_dim", "80"),
    ("frontend.sinc_filters", "40"),
    ("frontend.sinc_kernel", "251"),
    ("extractor.encoder", "ecapa_lite"),
    ("extractor.channels", "128"),
    ("extractor.tdnn_post_norm", "true"),
    ("extractor.se_bottleneck", "32"),
    ("extractor.pooling", "attentive_stats"),
    ("extractor.attention_hidden", "64"),
    ("extractor.projector", "batch_norm,linear"),
    ("extractor.embed_dim", "192"),
    ("loss.scale", "30"),
    ("loss.margin", "0.2"),
    ("loss.subcenters", "3"),
    ("loss.topk", "5"),
    ("loss.inter_margin", "0.1"),
    ("trainer.batch_size", "32"),
    ("trainer.steps", "2000"),
    ("trainer.seed", "0"),
    ("trainer.crop_seconds", "2.0"),
    ("trainer.peak_lr", "1e-3"),
    ("trainer.floor_lr", "1e-7"),
    ("trainer.warm_steps", "200"),
    ("trainer.cycle_steps", "1800"),
    ("trainer.beta1", "0.9"),
    ("trainer.beta2", "0.999"),
    ("trainer.adam_eps", "1e-8"),
    ("trainer.checkpoint_every", "500"),
    ("scoring.as_norm", "false"),
    ("scoring.top_n", "50"),
    ("scoring.cohort_per_speaker", "5"),
    ("scoring.qmf", "false"),
    ("scoring.qmf_l2", "1e-2"),
    ("scoring.p_target", "0.05"),
    ("scoring.c_miss", "1"),
    ("scoring.c_fa", "1"),
    ("registry.name", "toy-ecapa"),
    ("registry.dir", ""),
];

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Existing corpus (directory with `manifest.txt`); empty means generate one.
    pub corpus_dir: Option<PathBuf>,
    pub num_speakers: usize,
    pub utts_per_speaker: usize,
    pub seconds: f64,
    pub seed: u64,
    pub heldout_per_speaker: usize,
    pub perturb: PerturbLabelRule,
    pub num_target_trials: usize,
    pub num_nontarget_trials: usize,
    pub trial_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoringConfig {
    pub as_norm: bool,
    pub top_n: usize,
    pub cohort_per_speaker: usize,
    pub qmf: bool,
    pub qmf_l2: f64,
    pub dcf: DcfParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryConfig {
    pub name: String,
    /// Empty means `<config dir>/registry`.
    pub dir: Option<PathBuf>,
}

/// Parsed recipe configuration with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RecipeConfig {
    values: BTreeMap<String, String>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub registry: RegistryConfig,
}

fn err(line: usize, msg: impl Into<String>) -> RecipeError {
    RecipeError::Config {
        line,
        msg: msg.into(),
    }
}

/// Splits a config document into `(key, value, line)` triples.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once(':') else {
            return Err(err(n, format!("expected `section.key: value`, got {line:?}")));
        };
        let (key, value) = (key.trim(), value.trim());
        let Some((section, _)) = key.split_once('.') else {
            return Err(err(n, format!("key {key:?} lacks a section prefix")));
        };
        if !SECTIONS.contains(&section) {
            return Err(err(
                n,
                format!("unknown section {section:?}; valid sections: {}", SECTIONS.join(", ")),
            ));
        }
        if !DEFAULTS.iter().any(|(k, _)| *k == key) {
            let valid: Vec<&str> = DEFAULTS
                .iter()
                .map(|(k, _)| *k)
                .filter(|k| k.starts_with(&format!("{section}.")))
                .collect();
            return Err(err(n, format!("unknown key {key:?}; valid keys: {}", valid.join(", "))));
        }
        if let Some((_, _, first)) = out.iter().find(|(k, _, _)| k == key) {
            return Err(err(n, format!("duplicate key {key:?} (first set on line {first})")));
        }
        out.push((key.to_string(), value.to_string(), n));
    }
    Ok(out)
}

struct Fields<'a> {
    values: &'a BTreeMap<String, String>,
    lines: &'a BTreeMap<String, usize>,
}

impl Fields<'_> {
    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn line(&self, key: &str) -> usize {
        self.lines.get(key).copied().unwrap_or(0)
    }

    fn get<V: std::str::FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: std::fmt::Display,
    {
        self.raw(key)
            .parse()
            .map_err(|e| err(self.line(key), format!("{key}: {e}")))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        let v = self.raw(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }
}

impl RecipeConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut values: BTreeMap<String, String> = DEFAULTS
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut lines = BTreeMap::new();
        for (k, v, n) in pairs {
            lines.insert(k.clone(), n);
            values.insert(k, v);
        }
        Self::from_values(values, &lines)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RecipeError::Io(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn from_values(values: BTreeMap<String, String>, lines: &BTreeMap<String, usize>) -> Result<Self> {
        let f = Fields {
            values: &values,
            lines,
        };
        let factors = f
            .raw("data.speed_factors")
            .split(',')
            .map(|s| s.trim().parse::<SpeedFactor>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| err(f.line("data.speed_factors"), format!("data.speed_factors: {e}")))?;
        let perturb = PerturbLabelRule::new(factors, f.get("data.relabel_perturbed")?)
            .map_err(|e| err(f.line("data.speed_factors"), e.to_string()))?;
        let data = DataConfig {
            corpus_dir: f.path("data.corpus_dir"),
            num_speakers: f.get("data.num_speakers")?,
            utts_per_speaker: f.get("data.utts_per_speaker")?,
            seconds: f.get("data.seconds")?,
            seed: f.get("data.seed")?,
            heldout_per_speaker: f.get("data.heldout_per_speaker")?,
            perturb,
            num_target_trials: f.get("data.num_target_trials")?,
            num_nontarget_trials: f.get("data.num_nontarget_trials")?,
            trial_seed: f.get("data.trial_seed")?,
        };
        if f.path("data.augment_dir").is_some() {
            log::warn!("data.augment_dir is set but augmentation is not implemented; ignoring it");
        }
        let sample_rate: u32 = f.get("frontend.sample_rate")?;
        let extractor = ExtractorConfig {
            frontend: f.get("frontend.kind")?,
            sample_rate,
            mel: MelConfig {
                n_mels: f.get("frontend.n_mels")?,
                window_ms: f.get("frontend.window_ms")?,
                hop_ms: f.get("frontend.hop_ms")?,
                fft_size: f.get("frontend.fft_size")?,
                log_floor: f.get("frontend.log_floor")?,
            },
            sinc: SincSpec {
                n_filters: f.get("frontend.sinc_filters")?,
                kernel: f.get("frontend.sinc_kernel")?,
                stride: (sample_rate as usize * f.get::<u32>("frontend.hop_ms")? as usize / 1000).max(1),
                sample_rate,
                ..SincSpec::default()
            },
            feature_dim: f.get("frontend.feature_dim")?,
            feature_norm: f.get("frontend.feature_norm")?,
            encoder: f.get("extractor.encoder")?,
            channels: f.get("extractor.channels")?,
            tdnn_post_norm: f.get("extractor.tdnn_post_norm")?,
            se_bottleneck: f.get("extractor.se_bottleneck")?,
            pooling: f.get("extractor.pooling")?,
            attention_hidden: f.get("extractor.attention_hidden")?,
            projector: parse_projector(f.raw("extractor.projector"))
                .map_err(|e| err(f.line("extractor.projector"), e.to_string()))?,
            embed_dim: f.get("extractor.embed_dim")?,
        };
        extractor
            .validate()
            .map_err(|e| err(0, format!("extractor: {e}")))?;
        let loss = LossConfig {
            scale: f.get("loss.scale")?,
            margin: f.get("loss.margin")?,
            subcenters: f.get("loss.subcenters")?,
            topk: f.get("loss.topk")?,
            inter_margin: f.get("loss.inter_margin")?,
            num_classes: 2,
        };
        let train = TrainConfig {
            batch_size: f.get("trainer.batch_size")?,
            steps: f.get("trainer.steps")?,
            seed: f.get("trainer.seed")?,
            crop_seconds: f.get("trainer.crop_seconds")?,
            adam: AdamConfig {
                beta1: f.get("trainer.beta1")?,
                beta2: f.get("trainer.beta2")?,
                eps: f.get("trainer.adam_eps")?,
            },
            schedule: Schedule {
                peak_lr: f.get("trainer.peak_lr")?,
                floor_lr: f.get("trainer.floor_lr")?,
                warm_steps: f.get("trainer.warm_steps")?,
                cycle_steps: f.get("trainer.cycle_steps")?,
            },
            loss,
            extractor,
            checkpoint_every: f.get("trainer.checkpoint_every")?,
        };
        train
            .validate()
            .map_err(|e| err(0, format!("trainer: {e}")))?;
        let scoring = ScoringConfig {
            as_norm: f.get("scoring.as_norm")?,
            top_n: f.get("scoring.top_n")?,
            cohort_per_speaker: f.get("scoring.cohort_per_speaker")?,
            qmf: f.get("scoring.qmf")?,
            qmf_l2: f.get("scoring.qmf_l2")?,
            dcf: DcfParams {
                p_target: f.get("scoring.p_target")?,
                c_miss: f.get("scoring.c_miss")?,
                c_fa: f.get("scoring.c_fa")?,
            },
        };
        let name: String = f.raw("registry.name").to_string();
        if name.is_empty() || name.contains(|c: char| c.is_whitespace() || c == '/' || c == '\\') {
            return Err(err(
                f.line("registry.name"),
                format!("registry.name {name:?} must be non-empty without whitespace or slashes"),
            ));
        }
        let registry = RegistryConfig {
            name,
            dir: f.path("registry.dir"),
        };
        Ok(Self {
            values,
            data,
            train,
            scoring,
            registry,
        })
    }

    /// Effective value of `key` after defaults.
    pub fn value(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Returns a copy with `key` overridden; the result is re-validated.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        if !self.values.contains_key(key) {
            return Err(err(0, format!("unknown key {key:?}")));
        }
        let mut values = self.values.clone();
        values.insert(key.to_string(), value.to_string());
        Self::from_values(values, &BTreeMap::new())
    }

    /// All effective keys as sorted `key: value` lines; parses back to an equal config.
    pub fn canonical_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}: {v}");
        }
        s
    }

    /// SHA-256 over the effective values of `keys`, each a full key or a section name.
    pub fn keys_hash(&self, keys: &[&str]) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            let section = k.split('.').next().unwrap_or("");
            if keys.iter().any(|&s| s == k || s == section) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Hash of the whole effective configuration.
    pub fn hash(&self) -> String {
        self.keys_hash(&SECTIONS)
    }

    pub fn extractor(&self) -> &ExtractorConfig {
        &self.train.extractor
    }

    /// Projector spec exactly as it would be written back.
    pub fn projector_text(&self) -> String {
        format_projector(&self.train.extractor.projector)
    }
}
