//! The ten-stage recipe runner with content-hash stamps.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use spkforge_core::dsp::{load_waveform, relabel_speaker, save_waveform, speed_perturb};
use spkforge_core::extractor::{Extractor, ExtractorInput, SpeakerEmbedding};
use spkforge_core::scoring::{
    as_norm, fit_qmf, format_embeddings, format_scores, format_trials, metrics_report, parse_embeddings,
    parse_scores, qmf_apply, quality_features, read_trials, score_trials, AsNormConfig, EmbeddingTable,
    QmfConfig, Trial, TrialLabel,
};
use spkforge_core::trainer::{compute_stats, train, Checkpoint, Manifest, ManifestEntry, TrainOptions};

use crate::config::RecipeConfig;
use crate::corpus::gen_synthetic_corpus;
use crate::error::{RecipeError, Result};
use crate::registry::{load_package, registry_dir, write_package, Registry};
use crate::trials::make_trials;

pub const STAGE_NAMES: [&str; 10] = [
    "prepare data",
    "speed perturbation",
    "format data",
    "statistics",
    "training",
    "embedding extraction",
    "scoring",
    "metrics",
    "packaging",
    "registration",
];

/// Config keys (or whole sections) each stage depends on.
const STAGE_KEYS: [&[&str]; 10] = [
    &[
        "data.corpus_dir",
        "data.num_speakers",
        "data.utts_per_speaker",
        "data.seconds",
        "data.seed",
        "data.heldout_per_speaker",
    ],
    &["data.speed_factors", "data.relabel_perturbed"],
    &[
        "data.num_target_trials",
        "data.num_nontarget_trials",
        "data.trial_seed",
        "scoring.cohort_per_speaker",
        "scoring.qmf",
    ],
    &[],
    &["frontend", "extractor", "loss", "trainer"],
    &["frontend", "extractor"],
    &["scoring.as_norm", "scoring.top_n", "scoring.qmf", "scoring.qmf_l2"],
    &["scoring.p_target", "scoring.c_miss", "scoring.c_fa"],
    &["data", "frontend", "extractor", "loss", "trainer", "scoring", "registry"],
    &["registry"],
];

/// Sections whose hash is recorded in checkpoints and checked before packaging.
pub const TRAIN_SECTIONS: [&str; 4] = ["frontend", "extractor", "loss", "trainer"];

/// Number of utterances re-extracted to verify a package.
pub const PACKAGE_CHECK_UTTS: usize = 10;

/// Paths inside an experiment directory.
#[derive(Debug, Clone)]
pub struct ExpLayout {
    pub root: PathBuf,
}

impl ExpLayout {
    pub fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
    pub fn corpus(&self) -> PathBuf {
        self.p("corpus")
    }
    pub fn train_raw(&self) -> PathBuf {
        self.p("data/train_raw.txt")
    }
    pub fn heldout(&self) -> PathBuf {
        self.p("data/heldout.txt")
    }
    pub fn perturbed_dir(&self) -> PathBuf {
        self.p("perturbed")
    }
    pub fn perturbed(&self) -> PathBuf {
        self.p("data/perturbed.txt")
    }
    pub fn train(&self) -> PathBuf {
        self.p("data/train.txt")
    }
    pub fn spk2label(&self) -> PathBuf {
        self.p("data/spk2label.txt")
    }
    pub fn test(&self) -> PathBuf {
        self.p("data/test.txt")
    }
    pub fn trials(&self) -> PathBuf {
        self.p("data/trials.txt")
    }
    pub fn cohort(&self) -> PathBuf {
        self.p("data/cohort.txt")
    }
    pub fn dev_trials(&self) -> PathBuf {
        self.p("data/dev_trials.txt")
    }
    pub fn stats(&self) -> PathBuf {
        self.p("stats.txt")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.p("model")
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.p("model/final")
    }
    pub fn loss(&self) -> PathBuf {
        self.p("loss.txt")
    }
    pub fn test_emb(&self) -> PathBuf {
        self.p("embeddings/test.txt")
    }
    pub fn cohort_emb(&self) -> PathBuf {
        self.p("embeddings/cohort.txt")
    }
    pub fn raw_scores(&self) -> PathBuf {
        self.p("scores/raw.txt")
    }
    pub fn final_scores(&self) -> PathBuf {
        self.p("scores/final.txt")
    }
    pub fn qmf_model(&self) -> PathBuf {
        self.p("scores/qmf_model.txt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.p("metrics.txt")
    }
    pub fn package(&self, name: &str) -> PathBuf {
        self.p("package").join(name)
    }
    pub fn stamp(&self, stage: u8) -> PathBuf {
        self.p(&format!("stamps/stage{stage:02}.txt"))
    }
    pub fn lock(&self) -> PathBuf {
        self.p(".lock")
    }
}

/// Whether a stage executed or was skipped by its stamp.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOutcome {
    Ran,
    Skipped,
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(path: PathBuf) -> Result<Self> {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(RecipeError::Locked(path.parent().unwrap_or(Path::new(".")).to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            collect_files(&e, out)?;
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// SHA-256 over names and contents of every file under `paths`.
///
/// Names are taken relative to `base` when possible so the hash does not depend on where
/// the experiment lives.
pub fn hash_paths(base: &Path, paths: &[PathBuf]) -> Result<String> {
    let mut files = Vec::new();
    for p in paths {
        collect_files(p, &mut files)?;
    }
    let mut h = Sha256::new();
    for f in files {
        let name = f.strip_prefix(base).unwrap_or(&f);
        h.update(name.to_string_lossy().as_bytes());
        h.update([0]);
        let bytes = std::fs::read(&f)?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    Ok(Manifest::read(path)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn remove_if_exists(path: &Path) -> Result<()> {
    if path.is_dir() {
        std::fs::remove_dir_all(path)?;
    } else if path.exists() {
        std::fs::remove_file(path)?;
    }
    Ok(())
}

fn input_for(e: &ManifestEntry) -> Result<ExtractorInput<f64>> {
    if e.path.extension().is_some_and(|x| x == "spkf") {
        Ok(ExtractorInput::FeatureFile(e.path.clone()))
    } else {
        Ok(ExtractorInput::Wave(load_waveform(&e.path)?))
    }
}

/// Embeds every manifest entry; the table is keyed (and so ordered) by utt_id.
pub fn embed_manifest(ex: &Extractor<f64>, m: &Manifest) -> Result<EmbeddingTable<f64>> {
    let mut table = BTreeMap::new();
    for e in &m.entries {
        table.insert(e.utt_id.clone(), ex.extract(&input_for(e)?)?);
    }
    Ok(table)
}

/// A recipe bound to an experiment directory.
#[derive(Debug, Clone)]
pub struct Recipe {
    pub cfg: RecipeConfig,
    /// Directory relative paths in the config resolve against.
    pub base_dir: PathBuf,
    pub exp: ExpLayout,
}

impl Recipe {
    pub fn new(cfg: RecipeConfig, base_dir: impl Into<PathBuf>, exp_dir: impl Into<PathBuf>) -> Self {
        Self {
            cfg,
            base_dir: base_dir.into(),
            exp: ExpLayout { root: exp_dir.into() },
        }
    }

    /// Loads `config`; the experiment directory defaults to `exp/` next to it.
    pub fn from_config_file(config: &Path, exp_dir: Option<&Path>) -> Result<Self> {
        let cfg = RecipeConfig::load(config)?;
        let base = config
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let exp = exp_dir.map_or_else(|| base.join("exp"), Path::to_path_buf);
        Ok(Self::new(cfg, base, exp))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Registry location for stage 10.
    pub fn registry_dir(&self) -> PathBuf {
        let from_cfg = self.cfg.registry.dir.as_deref().map(|d| self.resolve(d));
        registry_dir(None, from_cfg.as_deref())
    }

    pub fn train_hash(&self) -> String {
        self.cfg.keys_hash(&TRAIN_SECTIONS)
    }

    /// Runs stages `start..=stop` in order, skipping those whose stamps still match.
    pub fn run(&self, start: u8, stop: u8) -> Result<Vec<(u8, StageOutcome)>> {
        for s in [start, stop] {
            if !(1..=10).contains(&s) {
                return Err(RecipeError::UnknownStage(s));
            }
        }
        if start > stop {
            return Err(RecipeError::StageRange { start, stop });
        }
        std::fs::create_dir_all(&self.exp.root)?;
        let _lock = LockGuard::acquire(self.exp.lock())?;
        let mut outcomes = Vec::new();
        for k in start..=stop {
            let outcome = self.run_stage(k).map_err(|e| RecipeError::Stage {
                stage: k,
                name: STAGE_NAMES[usize::from(k) - 1],
                source: Box::new(e),
            })?;
            outcomes.push((k, outcome));
        }
        Ok(outcomes)
    }

    fn run_stage(&self, k: u8) -> Result<StageOutcome> {
        let name = STAGE_NAMES[usize::from(k) - 1];
        let inputs = self.inputs(k)?;
        for p in &inputs {
            if !p.exists() {
                return Err(RecipeError::MissingInput {
                    stage: k,
                    path: p.clone(),
                });
            }
        }
        let mut h = Sha256::new();
        h.update([k]);
        h.update(self.cfg.keys_hash(STAGE_KEYS[usize::from(k) - 1]));
        if k == 10 {
            h.update(self.registry_dir().to_string_lossy().as_bytes());
        }
        h.update(hash_paths(&self.exp.root, &inputs)?);
        let input_hash = hex::encode(h.finalize());
        let outputs = self.outputs(k);
        let stamp = self.exp.stamp(k);
        if let Ok(text) = std::fs::read_to_string(&stamp) {
            let kv: BTreeMap<&str, &str> = text.lines().filter_map(|l| l.split_once('=')).collect();
            if kv.get("input") == Some(&input_hash.as_str())
                && outputs.iter().all(|p| p.exists())
                && kv.get("output").copied() == Some(hash_paths(&self.exp.root, &outputs)?.as_str())
            {
                log::info!("stage {k} ({name}): up to date, skipping");
                return Ok(StageOutcome::Skipped);
            }
        }
        log::info!("stage {k} ({name}): running");
        remove_if_exists(&stamp)?;
        self.exec(k)?;
        let output_hash = hash_paths(&self.exp.root, &outputs)?;
        write_text(&stamp, &format!("input={input_hash}\noutput={output_hash}\n"))?;
        Ok(StageOutcome::Ran)
    }

    fn manifest_with_files(&self, path: PathBuf) -> Result<Vec<PathBuf>> {
        let mut v = vec![path.clone()];
        if let Ok(m) = Manifest::read(&path) {
            v.extend(m.entries.into_iter().map(|e| e.path));
        }
        Ok(v)
    }

    fn inputs(&self, k: u8) -> Result<Vec<PathBuf>> {
        let x = &self.exp;
        Ok(match k {
            1 => match &self.cfg.data.corpus_dir {
                Some(d) => self.manifest_with_files(self.resolve(d).join("manifest.txt"))?,
                None => Vec::new(),
            },
            2 => self.manifest_with_files(x.train_raw())?,
            3 => vec![x.perturbed(), x.train_raw(), x.heldout()],
            4 => vec![x.train()],
            5 => {
                let mut v = self.manifest_with_files(x.train())?;
                v.push(x.spk2label());
                v
            }
            6 => {
                let mut v = vec![x.final_ckpt().with_extension("params"), x.final_ckpt().with_extension("meta")];
                v.extend(self.manifest_with_files(x.test())?);
                v.extend(self.manifest_with_files(x.cohort())?);
                v
            }
            7 => {
                let mut v = vec![x.trials(), x.test(), x.cohort(), x.test_emb(), x.cohort_emb()];
                if self.cfg.scoring.qmf {
                    v.push(x.dev_trials());
                }
                v
            }
            8 => vec![x.trials(), x.final_scores()],
            9 => {
                let mut v = vec![
                    x.final_ckpt().with_extension("params"),
                    x.final_ckpt().with_extension("meta"),
                    x.test_emb(),
                ];
                v.extend(self.manifest_with_files(x.test())?);
                v
            }
            10 => vec![x.package(&self.cfg.registry.name)],
            _ => return Err(RecipeError::UnknownStage(k)),
        })
    }

    fn outputs(&self, k: u8) -> Vec<PathBuf> {
        let x = &self.exp;
        match k {
            1 => {
                let mut v = vec![x.train_raw(), x.heldout()];
                if self.cfg.data.corpus_dir.is_none() {
                    v.insert(0, x.corpus());
                }
                v
            }
            2 => vec![x.perturbed(), x.perturbed_dir()],
            3 => {
                let mut v = vec![x.train(), x.spk2label(), x.test(), x.trials(), x.cohort()];
                if self.cfg.scoring.qmf {
                    v.push(x.dev_trials());
                }
                v
            }
            4 => vec![x.stats()],
            5 => vec![x.model_dir(), x.loss()],
            6 => vec![x.test_emb(), x.cohort_emb()],
            7 => {
                let mut v = vec![x.raw_scores(), x.final_scores()];
                if self.cfg.scoring.qmf {
                    v.push(x.qmf_model());
                }
                v
            }
            8 => vec![x.metrics()],
            9 => vec![x.package(&self.cfg.registry.name)],
            10 => vec![self.registry_dir().join(&self.cfg.registry.name)],
            _ => Vec::new(),
        }
    }

    fn exec(&self, k: u8) -> Result<()> {
        match k {
            1 => self.stage_prepare(),
            2 => self.stage_perturb(),
            3 => self.stage_format(),
            4 => self.stage_stats(),
            5 => self.stage_train(),
            6 => self.stage_embed(),
            7 => self.stage_score(),
            8 => self.stage_metrics(),
            9 => self.stage_package(),
            10 => self.stage_register(),
            _ => Err(RecipeError::UnknownStage(k)),
        }
    }

    fn stage_prepare(&self) -> Result<()> {
        let d = &self.cfg.data;
        let corpus = match &d.corpus_dir {
            Some(dir) => {
                let dir = self.resolve(dir);
                let mut m = read_manifest(&dir.join("manifest.txt"))?;
                for e in &mut m.entries {
                    if e.path.is_relative() {
                        e.path = dir.join(&e.path);
                    }
                }
                m
            }
            None => {
                remove_if_exists(&self.exp.corpus())?;
                gen_synthetic_corpus(d.num_speakers, d.utts_per_speaker, d.seconds, d.seed, &self.exp.corpus())?
            }
        };
        corpus.validate()?;
        let mut by_spk: BTreeMap<&str, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &corpus.entries {
            by_spk.entry(&e.speaker_id).or_default().push(e);
        }
        let mut train = Vec::new();
        let mut held = Vec::new();
        for (spk, mut utts) in by_spk {
            if utts.len() <= d.heldout_per_speaker {
                return Err(RecipeError::Trials(format!(
                    "speaker {spk} has {} utterances; {} are held out and none would remain for training",
                    utts.len(),
                    d.heldout_per_speaker
                )));
            }
            utts.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
            let cut = utts.len() - d.heldout_per_speaker;
            train.extend(utts[..cut].iter().map(|&e| e.clone()));
            held.extend(utts[cut..].iter().map(|&e| e.clone()));
        }
        write_text(&self.exp.train_raw(), &Manifest::new(train).to_text())?;
        write_text(&self.exp.heldout(), &Manifest::new(held).to_text())?;
        Ok(())
    }

    fn stage_perturb(&self) -> Result<()> {
        let rule = &self.cfg.data.perturb;
        let raw = read_manifest(&self.exp.train_raw())?;
        let out_dir = self.exp.perturbed_dir();
        remove_if_exists(&out_dir)?;
        std::fs::create_dir_all(&out_dir)?;
        let mut entries = Vec::new();
        for e in &raw.entries {
            let mut wave = None;
            for &f in &rule.factors {
                let speaker_id = relabel_speaker(&e.speaker_id, f, rule)?;
                if f.is_one() {
                    entries.push(ManifestEntry {
                        speaker_id,
                        ..e.clone()
                    });
                    continue;
                }
                if wave.is_none() {
                    wave = Some(load_waveform::<f64>(&e.path)?);
                }
                let w = speed_perturb(wave.as_ref().expect("loaded"), f)?;
                let utt_id = format!("{}#sp{f}", e.utt_id);
                let path = out_dir.join(format!("{}.wav", utt_id.replace('/', "_")));
                save_waveform(&path, &w)?;
                entries.push(ManifestEntry {
                    utt_id,
                    speaker_id,
                    path,
                    duration: w.duration_seconds(),
                });
            }
        }
        write_text(&self.exp.perturbed(), &Manifest::new(entries).to_text())
    }

    fn stage_format(&self) -> Result<()> {
        let d = &self.cfg.data;
        let train = read_manifest(&self.exp.perturbed())?;
        train.validate()?;
        write_text(&self.exp.train(), &train.to_text())?;
        let mut s = String::new();
        for (spk, label) in train.label_map() {
            let _ = writeln!(s, "{spk} {label}");
        }
        write_text(&self.exp.spk2label(), &s)?;
        let test = read_manifest(&self.exp.heldout())?;
        write_text(&self.exp.test(), &test.to_text())?;
        let trials = make_trials(&test, d.num_target_trials, d.num_nontarget_trials, d.trial_seed)?;
        write_text(&self.exp.trials(), &format_trials(&trials))?;
        let raw = read_manifest(&self.exp.train_raw())?;
        let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
        let cohort: Vec<ManifestEntry> = raw
            .entries
            .iter()
            .filter(|e| {
                let n = taken.entry(&e.speaker_id).or_insert(0);
                *n += 1;
                *n <= self.cfg.scoring.cohort_per_speaker
            })
            .cloned()
            .collect();
        let cohort = Manifest::new(cohort);
        write_text(&self.exp.cohort(), &cohort.to_text())?;
        if self.cfg.scoring.qmf {
            let dev = make_trials(
                &cohort,
                d.num_target_trials,
                d.num_nontarget_trials,
                d.trial_seed.wrapping_add(1),
            )?;
            write_text(&self.exp.dev_trials(), &format_trials(&dev))?;
        }
        Ok(())
    }

    fn stage_stats(&self) -> Result<()> {
        let stats = compute_stats(&read_manifest(&self.exp.train())?)?;
        write_text(&self.exp.stats(), &stats.to_text())
    }

    fn stage_train(&self) -> Result<()> {
        let m = read_manifest(&self.exp.train())?;
        remove_if_exists(&self.exp.model_dir())?;
        let opts = TrainOptions {
            checkpoint_dir: Some(self.exp.model_dir()),
            config_hash: self.train_hash(),
        };
        let ck = train::<f64>(&self.cfg.train, &m, &opts)?;
        let mut s = String::new();
        for (i, l) in ck.losses.iter().enumerate() {
            let _ = writeln!(s, "{} {l:.17e}", i + 1);
        }
        write_text(&self.exp.loss(), &s)?;
        log::info!(
            "trained {} steps, loss {:.4} -> {:.4}",
            ck.step,
            ck.losses.first().copied().unwrap_or(f64::NAN),
            ck.losses.last().copied().unwrap_or(f64::NAN)
        );
        Ok(())
    }

    /// Final checkpoint, rejected if it was trained under a different configuration.
    pub fn load_checkpoint(&self) -> Result<Checkpoint<f64>> {
        let ck = Checkpoint::<f64>::load(&self.exp.final_ckpt())?;
        let want = self.train_hash();
        if ck.config_hash != want {
            return Err(RecipeError::HashMismatch {
                name: "checkpoint config".into(),
                expected: want,
                found: ck.config_hash,
            });
        }
        Ok(ck)
    }

    pub fn load_extractor(&self) -> Result<Extractor<f64>> {
        let ck = self.load_checkpoint()?;
        Ok(Extractor::with_params(self.cfg.extractor(), &ck.extractor_params())?)
    }

    fn stage_embed(&self) -> Result<()> {
        let ex = self.load_extractor()?;
        let test = embed_manifest(&ex, &read_manifest(&self.exp.test())?)?;
        write_text(&self.exp.test_emb(), &format_embeddings(&test))?;
        let cohort = embed_manifest(&ex, &read_manifest(&self.exp.cohort())?)?;
        write_text(&self.exp.cohort_emb(), &format_embeddings(&cohort))
    }

    fn read_table(path: &Path) -> Result<EmbeddingTable<f64>> {
        Ok(parse_embeddings(&std::fs::read_to_string(path)?)?)
    }

    fn stage_score(&self) -> Result<()> {
        let sc = &self.cfg.scoring;
        let trials = read_trials(self.exp.trials())?;
        let test = Self::read_table(&self.exp.test_emb())?;
        let cohort_table = Self::read_table(&self.exp.cohort_emb())?;
        let cohort: Vec<SpeakerEmbedding<f64>> = cohort_table.values().cloned().collect();
        let raw = score_trials(&test, &trials)?;
        write_text(&self.exp.raw_scores(), &format_scores(&trials, &raw))?;
        let norm = |scores: Vec<f64>, table: &EmbeddingTable<f64>, trials: &[Trial]| -> Result<Vec<f64>> {
            if !sc.as_norm {
                return Ok(scores);
            }
            let cfg = AsNormConfig {
                top_n: sc.top_n.min(cohort.len()),
            };
            Ok(as_norm(&scores, table, trials, &cohort, cfg)?)
        };
        let mut scores = norm(raw, &test, &trials)?;
        if sc.qmf {
            let mut durations = BTreeMap::new();
            for p in [self.exp.test(), self.exp.cohort()] {
                for e in read_manifest(&p)?.entries {
                    durations.insert(e.utt_id, e.duration);
                }
            }
            let dev = read_trials(self.exp.dev_trials())?;
            let dev_scores = norm(score_trials(&cohort_table, &dev)?, &cohort_table, &dev)?;
            let dev_feats = quality_features(&dev_scores, &cohort_table, &dev, &durations, &cohort)?;
            let is_target: Vec<bool> = dev.iter().map(|t| t.label == TrialLabel::Target).collect();
            let model = fit_qmf(
                &dev_feats,
                &is_target,
                QmfConfig {
                    l2: sc.qmf_l2,
                    ..QmfConfig::default()
                },
            )?;
            write_text(&self.exp.qmf_model(), &model.to_text())?;
            let feats = quality_features(&scores, &test, &trials, &durations, &cohort)?;
            scores = qmf_apply(&model, &feats)?;
        }
        write_text(&self.exp.final_scores(), &format_scores(&trials, &scores))
    }

    fn stage_metrics(&self) -> Result<()> {
        let trials = read_trials(self.exp.trials())?;
        let rows = parse_scores(&std::fs::read_to_string(self.exp.final_scores())?)?;
        if rows.len() != trials.len()
            || rows.iter().zip(&trials).any(|((e, t, _), tr)| *e != tr.enroll || *t != tr.test)
        {
            return Err(RecipeError::Trials("score file does not line up with the trial list".into()));
        }
        let scores: Vec<f64> = rows.iter().map(|r| r.2).collect();
        let labels: Vec<TrialLabel> = trials.iter().map(|t| t.label).collect();
        let report = metrics_report(&scores, &labels, self.cfg.scoring.dcf)?;
        for line in report.lines().take_while(|l| !l.contains('=')) {
            log::info!("{line}");
        }
        write_text(&self.exp.metrics(), &report)
    }

    fn stage_package(&self) -> Result<()> {
        let ck = self.load_checkpoint()?;
        let params = ck.extractor_params();
        let ex = Extractor::with_params(self.cfg.extractor(), &params)?;
        let dir = self.exp.package(&self.cfg.registry.name);
        remove_if_exists(&dir)?;
        write_package(
            &dir,
            &self.cfg,
            &params,
            &[
                ("num_params", ex.num_params().to_string()),
                ("trained_steps", ck.step.to_string()),
                ("train_config_hash", ck.config_hash.clone()),
            ],
        )?;
        let verify = || -> Result<()> {
            let model = load_package(&dir)?;
            let reference = Self::read_table(&self.exp.test_emb())?;
            let test = read_manifest(&self.exp.test())?;
            let mut entries = test.entries.clone();
            entries.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
            let mut worst = 0.0f64;
            for e in entries.iter().take(PACKAGE_CHECK_UTTS) {
                let got = model.extractor.extract(&input_for(e)?)?;
                let want = reference
                    .get(&e.utt_id)
                    .ok_or_else(|| RecipeError::Trials(format!("no reference embedding for {}", e.utt_id)))?;
                for (a, b) in got.as_slice().iter().zip(want.as_slice()) {
                    worst = worst.max((a - b).abs());
                }
            }
            if worst != 0.0 {
                return Err(RecipeError::NotReproducible(worst));
            }
            Ok(())
        };
        if let Err(e) = verify() {
            remove_if_exists(&dir)?;
            return Err(e);
        }
        Ok(())
    }

    fn stage_register(&self) -> Result<()> {
        let reg = Registry::open(self.registry_dir());
        let name = reg.register(&self.exp.package(&self.cfg.registry.name))?;
        log::info!("registered {name} in {}", reg.root().display());
        Ok(())
    }
}
