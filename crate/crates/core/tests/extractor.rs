use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spkforge_core::dsp::{write_spkf, FeatureSequence, MelConfig, Waveform};
use spkforge_core::extractor::{
    EncoderKind, Extractor, ExtractorConfig, ExtractorInput, FrontendKind, Pooling, PoolingKind,
    ProjectorLayer,
};
use spkforge_core::nn::{grad_check_sampled, Ctx, Graph, Mode, ParamStore, SincSpec, Tensor};

fn noise(len: usize, seed: u64) -> Waveform<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Waveform::new((0..len).map(|_| rng.gen_range(-0.3..0.3)).collect(), 16000).unwrap()
}

fn small(frontend: FrontendKind, encoder: EncoderKind, pooling: PoolingKind) -> ExtractorConfig {
    ExtractorConfig {
        frontend,
        mel: MelConfig {
            n_mels: 12,
            ..MelConfig::default()
        },
        sinc: SincSpec {
            n_filters: 6,
            kernel: 101,
            ..SincSpec::default()
        },
        feature_dim: 5,
        encoder,
        channels: 8,
        se_bottleneck: 3,
        pooling,
        attention_hidden: 4,
        projector: vec![ProjectorLayer::BatchNorm, ProjectorLayer::Linear(None)],
        embed_dim: 7,
        ..ExtractorConfig::default()
    }
}

fn input_for(kind: FrontendKind) -> ExtractorInput<f64> {
    match kind {
        FrontendKind::PrecomputedFile => {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            // stored as f32 on disk, so start from representable values
            let v = (0..5 * 30)
                .map(|_| f64::from(rng.gen_range(-1.0f32..1.0)))
                .collect();
            ExtractorInput::Features(FeatureSequence::new(v, 30, 5, 100.0).unwrap())
        }
        _ => ExtractorInput::Wave(noise(8000, 3)),
    }
}

#[test]
fn every_component_combination_yields_embed_dim() {
    for &fe in FrontendKind::ALL {
        for &enc in EncoderKind::ALL {
            for &pool in PoolingKind::ALL {
                let cfg = small(fe, enc, pool);
                let ex = Extractor::<f64>::build(&cfg, 1).unwrap();
                let e = ex.extract(&input_for(fe)).unwrap();
                assert_eq!(e.dim(), 7, "{fe} {enc} {pool}");
                assert!(e.as_slice().iter().all(|v| v.is_finite()), "{fe} {enc} {pool}");
            }
        }
    }
}

#[test]
fn unknown_encoder_is_rejected_with_options() {
    let msg = "conformer".parse::<EncoderKind>().unwrap_err().to_string();
    assert!(msg.contains("{tdnn, ecapa_lite, identity}"), "{msg}");
}

#[test]
fn mel_frontend_shape_for_three_seconds() {
    let cfg = ExtractorConfig::default();
    let ex = Extractor::<f64>::build(&cfg, 0).unwrap();
    let f = ex.frontend_features(&ExtractorInput::Wave(noise(48000, 1))).unwrap();
    assert_eq!((f.num_frames(), f.dim()), (298, 80));
}

#[test]
fn sinc_frontend_frame_count_for_three_seconds() {
    let cfg = ExtractorConfig {
        frontend: FrontendKind::SincRaw,
        ..ExtractorConfig::default()
    };
    let ex = Extractor::<f64>::build(&cfg, 0).unwrap();
    let f = ex.frontend_features(&ExtractorInput::Wave(noise(48000, 1))).unwrap();
    assert_eq!(f.dim(), 40);
    assert!((f.num_frames() as i64 - 300).abs() <= 2, "{}", f.num_frames());
}

#[test]
fn precomputed_features_pass_through() {
    let cfg = small(FrontendKind::PrecomputedFile, EncoderKind::Identity, PoolingKind::Mean);
    let ex = Extractor::<f64>::build(&cfg, 0).unwrap();
    let ExtractorInput::Features(f) = input_for(FrontendKind::PrecomputedFile) else {
        unreachable!()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("u.spkf");
    write_spkf(&path, &f).unwrap();
    let out = ex.frontend_features(&ExtractorInput::FeatureFile(path.clone())).unwrap();
    assert_eq!(out.values(), f.values());
    let a = ex.extract(&ExtractorInput::FeatureFile(path)).unwrap();
    let b = ex.extract(&ExtractorInput::Features(f)).unwrap();
    assert_eq!(a, b);

    let wrong = FeatureSequence::new(vec![0.0; 12], 3, 4, 100.0).unwrap();
    assert!(ex.extract(&ExtractorInput::Features(wrong)).is_err());
    assert!(ex.extract(&ExtractorInput::Wave(noise(4000, 0))).is_err());
}

#[test]
fn same_seed_same_parameters() {
    let cfg = small(FrontendKind::Mel, EncoderKind::EcapaLite, PoolingKind::AttentiveStats);
    let a = Extractor::<f64>::build(&cfg, 9).unwrap();
    let b = Extractor::<f64>::build(&cfg, 9).unwrap();
    let c = Extractor::<f64>::build(&cfg, 10).unwrap();
    let x = input_for(FrontendKind::Mel);
    assert_eq!(a.extract(&x).unwrap(), b.extract(&x).unwrap());
    assert_ne!(a.extract(&x).unwrap(), c.extract(&x).unwrap());
}

#[test]
fn reloading_parameters_reproduces_embeddings() {
    let cfg = small(FrontendKind::Mel, EncoderKind::Tdnn, PoolingKind::Stats);
    let a = Extractor::<f64>::build(&cfg, 2).unwrap();
    let bytes = a.params().to_bytes();
    let b = Extractor::with_params(&cfg, &ParamStore::from_bytes(&bytes).unwrap()).unwrap();
    let x = input_for(FrontendKind::Mel);
    assert_eq!(a.extract(&x).unwrap(), b.extract(&x).unwrap());
}

#[test]
fn single_precision_extractor_runs() {
    let cfg = small(FrontendKind::Mel, EncoderKind::EcapaLite, PoolingKind::AttentiveStats);
    let ex = Extractor::<f32>::build(&cfg, 1).unwrap();
    let w = noise(8000, 3);
    let w = Waveform::new(w.samples.iter().map(|&v| v as f32).collect(), 16000).unwrap();
    let e = ex.extract(&ExtractorInput::Wave(w)).unwrap();
    assert_eq!(e.dim(), 7);
}

fn pool_values(kind: PoolingKind, h: &Tensor<f64>, zero_scores: bool) -> Vec<f64> {
    let c = h.shape()[1];
    let cfg = ExtractorConfig {
        frontend: FrontendKind::PrecomputedFile,
        feature_dim: c,
        encoder: EncoderKind::Identity,
        pooling: kind,
        attention_hidden: 3,
        ..ExtractorConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pooling = Pooling::build(&cfg, &mut store, &mut rng).unwrap();
    if zero_scores {
        let id = store.find("pooling.attn_score.weight").unwrap();
        store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g = Graph::new();
    let vars = store.bind(&mut g);
    let mut cx = Ctx::new(&mut g, &store, &vars, Mode::Eval);
    let hv = cx.g.constant(h.clone());
    let y = pooling.forward(&mut cx, hv).unwrap();
    cx.g.value(y).data().to_vec()
}

fn random_frames(b: usize, c: usize, t: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..b * c * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(vec![b, c, t], v).unwrap()
}

#[test]
fn uniform_attention_equals_statistics_pooling() {
    let h = random_frames(2, 4, 9, 8);
    let a = pool_values(PoolingKind::AttentiveStats, &h, true);
    let s = pool_values(PoolingKind::Stats, &h, false);
    assert_eq!(a.len(), 16);
    for (x, y) in a.iter().zip(&s) {
        assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
    }
}

#[test]
fn stats_pooling_of_zero_two_sequence() {
    let h = Tensor::new(vec![1, 1, 2], vec![0.0, 2.0]).unwrap();
    let y = pool_values(PoolingKind::Stats, &h, false);
    assert!((y[0] - 1.0).abs() < 1e-12 && (y[1] - 1.0).abs() < 1e-12, "{y:?}");
    let m = pool_values(PoolingKind::Mean, &h, false);
    assert_eq!(m, vec![1.0]);
}

#[test]
fn constant_frames_hit_variance_floor() {
    let h = Tensor::new(vec![1, 2, 5], vec![3.0; 10]).unwrap();
    let y = pool_values(PoolingKind::Stats, &h, false);
    assert!(y.iter().all(|v| v.is_finite()));
    assert!((y[2] - 1e-4).abs() < 1e-12, "{y:?}");
}

fn permute_time(h: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let (b, c, t) = (h.shape()[0], h.shape()[1], h.shape()[2]);
    let mut out = vec![0.0; b * c * t];
    for row in 0..b * c {
        for (i, &p) in perm.iter().enumerate() {
            out[row * t + i] = h.data()[row * t + p];
        }
    }
    Tensor::new(h.shape().to_vec(), out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pooling_ignores_frame_order(
        seed in 0u64..1000,
        t in 2usize..12,
        kind in prop::sample::select(PoolingKind::ALL.to_vec()),
        shuffle_seed in 0u64..1000,
    ) {
        use rand::seq::SliceRandom;
        let h = random_frames(2, 3, t, seed);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
        let a = pool_values(kind, &h, false);
        let b = pool_values(kind, &permute_time(&h, &perm), false);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9, "{} vs {}", x, y);
        }
    }
}

fn check_extractor_gradients(cfg: &ExtractorConfig, x: Tensor<f64>, step: f64, tol: f64) {
    let ex = Extractor::<f64>::build(cfg, 11).unwrap();
    let store = ex.params();
    let points: Vec<Tensor<f64>> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.value.clone())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w: Vec<f64> = (0..x.shape()[0] * cfg.embed_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let err = grad_check_sampled(
        |g, vars| {
            let bound = store.bind_with(g, vars)?;
            let mut cx = Ctx::new(g, store, &bound, Mode::Train);
            let xv = cx.g.constant(x.clone());
            let y = ex.forward(&mut cx, xv)?;
            let wv = g.constant(Tensor::new(g.shape(y).to_vec(), w.clone())?);
            let p = g.mul(y, wv)?;
            Ok(g.sum(p))
        },
        &points,
        step,
        6,
        3,
    )
    .unwrap();
    assert!(err < tol, "{err}");
}

#[test]
fn gradients_through_ecapa_attentive_extractor() {
    let cfg = small(FrontendKind::PrecomputedFile, EncoderKind::EcapaLite, PoolingKind::AttentiveStats);
    check_extractor_gradients(&cfg, random_frames(3, 5, 7, 2), 1e-6, 1e-6);
}

#[test]
fn gradients_through_tdnn_stats_extractor() {
    // five stacked ReLU layers: a small step keeps probes off the kinks
    let cfg = small(FrontendKind::PrecomputedFile, EncoderKind::Tdnn, PoolingKind::Stats);
    check_extractor_gradients(&cfg, random_frames(3, 5, 7, 4), 1e-7, 1e-6);
}

#[test]
fn gradients_through_tdnn_without_norm() {
    let cfg = ExtractorConfig {
        tdnn_post_norm: false,
        ..small(FrontendKind::PrecomputedFile, EncoderKind::Tdnn, PoolingKind::Stats)
    };
    check_extractor_gradients(&cfg, random_frames(3, 5, 7, 4), 1e-7, 1e-6);
}

#[test]
fn gradients_through_sinc_frontend() {
    let cfg = ExtractorConfig {
        projector: vec![ProjectorLayer::Linear(None)],
        ..small(FrontendKind::SincRaw, EncoderKind::Identity, PoolingKind::Stats)
    };
    check_extractor_gradients(&cfg, random_frames(2, 1, 400, 6), 1e-6, 1e-5);
}

