use std::path::Path;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spkforge_core::dsp::{relabel_speaker, save_waveform, MelConfig, PerturbLabelRule, Waveform};
use spkforge_core::extractor::{EncoderKind, Extractor, ExtractorConfig, PoolingKind, ProjectorLayer};
use spkforge_core::nn::{ParamStore, Tensor};
use spkforge_core::objectives::LossConfig;
use spkforge_core::trainer::*;

fn entry(utt: &str, spk: &str, dur: f64) -> ManifestEntry {
    ManifestEntry {
        utt_id: utt.into(),
        speaker_id: spk.into(),
        path: format!("/data/{utt}.wav").into(),
        duration: dur,
    }
}

fn six_utts() -> Manifest {
    Manifest::new(
        (0..6)
            .map(|i| entry(&format!("u{i}"), if i < 3 { "alice" } else { "bob" }, 3.0))
            .collect(),
    )
}

#[test]
fn stats_of_two_speakers() {
    let s = compute_stats(&six_utts()).unwrap();
    assert_eq!((s.num_utts, s.num_speakers), (6, 2));
    assert!((s.total_hours - 0.005).abs() < 1e-15);
    assert_eq!(s.per_speaker["alice"], 3);
    let mut m = six_utts();
    m.entries.reverse();
    assert_eq!(compute_stats(&m).unwrap(), s);
}

#[test]
fn stats_errors() {
    assert!(compute_stats(&Manifest::default()).is_err());
    let mut m = six_utts();
    m.entries[1].utt_id = "u0".into();
    assert!(matches!(compute_stats(&m), Err(spkforge_core::Error::DuplicateUtterance(_))));
}

#[test]
fn manifest_text_round_trip() {
    let m = six_utts();
    assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
    assert!(Manifest::parse("u1 spk /x.wav").is_err());
    assert!(Manifest::parse("u1 spk /x.wav abc").is_err());
}

#[test]
fn batches_are_seeded_and_dense() {
    let m = six_utts();
    let a: Vec<Batch> = make_batches(&m, 4, 7).unwrap().take(10).collect();
    let b: Vec<Batch> = make_batches(&m, 4, 7).unwrap().take(10).collect();
    let c: Vec<Batch> = make_batches(&m, 4, 8).unwrap().take(10).collect();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let mut labels: Vec<usize> = a.iter().flat_map(|x| x.labels.clone()).collect();
    labels.sort();
    labels.dedup();
    assert_eq!(labels, vec![0, 1]);
    assert!(make_batches(&m, 7, 0).is_err());
    let one = Manifest::new(vec![entry("a", "s", 1.0), entry("b", "s", 1.0)]);
    assert!(make_batches(&one, 2, 0).is_err());
}

#[test]
fn each_epoch_visits_distinct_rows() {
    let m = six_utts();
    for batch in make_batches(&m, 3, 1).unwrap().take(8) {
        let mut rows = batch.rows.clone();
        rows.dedup();
        assert_eq!(rows.len(), 3);
    }
}

#[test]
fn perturbed_speakers_are_separate_classes() {
    let rule = PerturbLabelRule::default();
    let mut entries = Vec::new();
    for s in 0..10 {
        for f in &rule.factors {
            let spk = relabel_speaker(&format!("spk{s:02}"), *f, &rule).unwrap();
            entries.push(entry(&format!("{spk}-u"), &spk, 3.0));
        }
    }
    let m = Manifest::new(entries);
    let map = m.label_map();
    assert_eq!(map.len(), 30);
    let mut v: Vec<usize> = map.values().copied().collect();
    v.sort();
    assert_eq!(v, (0..30).collect::<Vec<_>>());
}

#[test]
fn schedule_landmarks() {
    let s = Schedule {
        peak_lr: 1e-3,
        floor_lr: 1e-7,
        warm_steps: 100,
        cycle_steps: 400,
    };
    assert_eq!(lr_at(0, &s), 1e-7);
    assert!((lr_at(100, &s) - 1e-3).abs() < 1e-18);
    assert!((lr_at(300, &s) - (1e-3 + 1e-7) / 2.0).abs() < 1e-15);
    assert!((lr_at(500, &s) - 1e-3).abs() < 1e-18);
    assert!(lr_at(499, &s) < 1e-6);
}

proptest! {
    #[test]
    fn schedule_stays_in_range(step in 0usize..100_000, warm in 0usize..500, cycle in 1usize..5000) {
        let s = Schedule { peak_lr: 2e-3, floor_lr: 1e-6, warm_steps: warm, cycle_steps: cycle };
        let lr = lr_at(step, &s);
        prop_assert!((1e-6 - 1e-18..=2e-3 + 1e-18).contains(&lr));
    }

    #[test]
    fn schedule_continuous_within_cycle(step in 0usize..10_000) {
        let s = Schedule { peak_lr: 1e-3, floor_lr: 1e-7, warm_steps: 50, cycle_steps: 1000 };
        let boundary = step >= 50 && (step + 1 - 50) % 1000 == 0;
        if !boundary {
            prop_assert!((lr_at(step + 1, &s) - lr_at(step, &s)).abs() <= 1e-3 * 0.021);
        }
    }
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = Tensor::from_vec(vec![1.0f64, -2.0, 3.0]);
    let before = p.clone();
    let mut adam = Adam::new(AdamConfig::default(), &[&[3]]);
    for _ in 0..5 {
        adam.step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut p = Tensor::from_vec(vec![1.0f64, 1.0]);
    let mut adam = Adam::new(AdamConfig::default(), &[&[2]]);
    adam.step(&mut [&mut p], &[Tensor::from_vec(vec![0.5, -4.0])], 0.01).unwrap();
    // bias-corrected moments give g / (|g| + eps)
    assert!((p.data()[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    assert!((p.data()[1] - (1.0 + 0.01 * 4.0 / (4.0 + 1e-8))).abs() < 1e-15);
}

fn tone_corpus(dir: &Path, speakers: usize, utts: usize) -> Manifest {
    let mut entries = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for s in 0..speakers {
        let f0 = 200.0 + 350.0 * s as f64;
        for u in 0..utts {
            let phase: f64 = rng.gen_range(0.0..6.28);
            let samples: Vec<f64> = (0..8000)
                .map(|i| {
                    0.3 * (2.0 * std::f64::consts::PI * f0 * i as f64 / 16000.0 + phase).sin()
                        + rng.gen_range(-0.05..0.05)
                })
                .collect();
            let utt = format!("s{s}-u{u}");
            let path = dir.join(format!("{utt}.wav"));
            save_waveform(&path, &Waveform::new(samples, 16000).unwrap()).unwrap();
            entries.push(ManifestEntry {
                utt_id: utt,
                speaker_id: format!("s{s}"),
                path,
                duration: 0.5,
            });
        }
    }
    Manifest::new(entries)
}

fn tiny_config(steps: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        steps,
        seed: 3,
        crop_seconds: 0.3,
        schedule: Schedule {
            peak_lr: 5e-3,
            floor_lr: 1e-6,
            warm_steps: 5,
            cycle_steps: 100,
        },
        loss: LossConfig {
            scale: 10.0,
            subcenters: 2,
            topk: 1,
            ..LossConfig::default()
        },
        extractor: ExtractorConfig {
            mel: MelConfig {
                n_mels: 12,
                ..MelConfig::default()
            },
            encoder: EncoderKind::EcapaLite,
            channels: 8,
            se_bottleneck: 2,
            pooling: PoolingKind::AttentiveStats,
            attention_hidden: 4,
            projector: vec![ProjectorLayer::BatchNorm, ProjectorLayer::Linear(None)],
            embed_dim: 6,
            ..ExtractorConfig::default()
        },
        checkpoint_every: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_returns_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let m = tone_corpus(dir.path(), 3, 2);
    let cfg = tiny_config(0);
    let ck: Checkpoint<f64> = train(&cfg, &m, &TrainOptions::default()).unwrap();
    let init = Extractor::<f64>::build(&cfg.extractor, cfg.seed).unwrap();
    assert_eq!(&ck.extractor_params(), init.params());
    assert!(ck.losses.is_empty());
}

#[test]
fn training_is_deterministic_and_checkpointed() {
    let dir = tempfile::tempdir().unwrap();
    let m = tone_corpus(dir.path(), 3, 3);
    let cfg = tiny_config(5);
    let ck_dir = dir.path().join("ck");
    let opts = TrainOptions {
        checkpoint_dir: Some(ck_dir.clone()),
        config_hash: "abc".into(),
    };
    let a: Checkpoint<f64> = train(&cfg, &m, &opts).unwrap();
    let b: Checkpoint<f64> = train(&cfg, &m, &TrainOptions::default()).unwrap();
    assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    assert_eq!(a.losses, b.losses);
    for stem in ["step_000002", "step_000004", "final"] {
        assert!(ck_dir.join(format!("{stem}.params")).exists(), "{stem}");
        assert!(ck_dir.join(format!("{stem}.meta")).exists(), "{stem}");
    }
    let loaded = Checkpoint::<f64>::load(&ck_dir.join("final")).unwrap();
    assert_eq!(loaded, a);
    let mid = Checkpoint::<f64>::load(&ck_dir.join("step_000002")).unwrap();
    assert_eq!((mid.step, mid.losses.len(), mid.config_hash.as_str()), (2, 2, "abc"));

    let head = a.params.find(HEAD_PARAM).unwrap();
    for row in a.params.get(head).value.data().chunks(6) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-12);
    }
    let ex = Extractor::<f64>::with_params(&cfg.extractor, &a.extractor_params()).unwrap();
    assert_eq!(ex.params().num_trainable() + a.params.get(head).value.numel(), a.params.num_trainable());
}

#[test]
fn training_reduces_loss_on_separable_speakers() {
    let dir = tempfile::tempdir().unwrap();
    let m = tone_corpus(dir.path(), 3, 4);
    let cfg = TrainConfig {
        checkpoint_every: 0,
        ..tiny_config(60)
    };
    let ck: Checkpoint<f64> = train(&cfg, &m, &TrainOptions::default()).unwrap();
    let first: f64 = ck.losses[..5].iter().sum::<f64>() / 5.0;
    let last: f64 = ck.losses[55..].iter().sum::<f64>() / 5.0;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn exploding_updates_report_divergence_step() {
    let dir = tempfile::tempdir().unwrap();
    let m = tone_corpus(dir.path(), 2, 2);
    let mut cfg = tiny_config(4);
    cfg.schedule = Schedule {
        peak_lr: 1e300,
        floor_lr: 1e299,
        warm_steps: 0,
        cycle_steps: 10,
    };
    let err = train::<f64>(&cfg, &m, &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, spkforge_core::Error::Diverged { step: 1, .. }), "{err}");
}

#[test]
fn checkpoint_params_reload_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let m = tone_corpus(dir.path(), 2, 2);
    let ck: Checkpoint<f64> = train(&tiny_config(2), &m, &TrainOptions::default()).unwrap();
    let p = dir.path().join("x.params");
    ck.params.save(&p).unwrap();
    assert_eq!(ParamStore::<f64>::load(&p).unwrap(), ck.params);
}
