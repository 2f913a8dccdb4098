use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spkforge_core::nn::{grad_check, Graph, Tensor};
use spkforge_core::objectives::{
    aam_logits, cross_entropy, hardest_negatives, inter_topk_adjust, loss, loss_graph,
    subcenter_cosines, ClassWeights, LossConfig,
};

fn cfg(scale: f64, margin: f64, subcenters: usize, topk: usize, inter: f64, classes: usize) -> LossConfig {
    LossConfig {
        scale,
        margin,
        subcenters,
        topk,
        inter_margin: inter,
        num_classes: classes,
    }
}

fn random_setup(seed: u64, b: usize, c: usize, k: usize, d: usize) -> (Vec<f64>, Vec<usize>, ClassWeights<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels = (0..b).map(|_| rng.gen_range(0..c)).collect();
    let w = ClassWeights::random(c, k, d, &mut rng);
    (e, labels, w)
}

fn weights(rows: &[[f64; 2]], k: usize) -> ClassWeights<f64> {
    let data = rows.iter().flatten().copied().collect();
    ClassWeights::new(Tensor::new(vec![rows.len() / k, k, 2], data).unwrap()).unwrap()
}

#[test]
fn single_subcenter_is_plain_cosine() {
    let w = weights(&[[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]], 1);
    let c = subcenter_cosines(&[1.0, 0.0], &w).unwrap();
    assert!((c[0] - 1.0).abs() < 1e-15 && c[1].abs() < 1e-15);
    assert!((c[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
}

#[test]
fn aligned_subcenter_gives_one() {
    let w = weights(&[[0.0, 1.0], [-1.0, 0.0], [0.3, 0.2], [0.0, -1.0], [1.0, 1.0], [-1.0, 0.0]], 3);
    let c = subcenter_cosines(&[0.3, 0.2], &w).unwrap();
    assert!((c[0] - 1.0).abs() < 1e-15);
}

#[test]
fn subcenter_takes_best_angle() {
    let at = |deg: f64| [deg.to_radians().cos(), deg.to_radians().sin()];
    let w = weights(&[at(60.0), at(30.0)], 2);
    let c = subcenter_cosines(&[1.0, 0.0], &w).unwrap();
    assert!((c[0] - 0.8660254037844387).abs() < 1e-12, "{c:?}");
}

#[test]
fn zero_embedding_is_rejected() {
    let w = weights(&[[1.0, 0.0], [0.0, 1.0]], 1);
    assert!(subcenter_cosines(&[0.0, 0.0], &w).is_err());
}

#[test]
fn margin_free_logits_are_scaled_cosines() {
    let c = cfg(7.0, 0.0, 1, 0, 0.0, 3);
    let cos = [0.5f64, -0.2, 0.9];
    let l = aam_logits(&cos, 1, &c).unwrap();
    for (a, b) in l.iter().zip(cos) {
        assert!((a - 7.0 * b).abs() < 1e-14);
    }
}

#[test]
fn target_margin_on_aligned_embedding() {
    let c = cfg(30.0, 0.2, 1, 0, 0.0, 2);
    let l = aam_logits(&[1.0f64, 0.0], 0, &c).unwrap();
    assert!((l[0] - 29.401997335237247).abs() < 1e-10, "{}", l[0]);
    assert_eq!(l[1], 0.0);
    assert!(aam_logits(&[1.0, 0.0], 2, &c).is_err());
}

#[test]
fn easy_margin_guard_beyond_pi() {
    let c = cfg(1.0, 0.3, 1, 0, 0.0, 2);
    let cos = -0.99;
    let l = aam_logits(&[cos, 0.0], 0, &c).unwrap();
    assert!((l[0] - (cos - 0.3 * 0.3f64.sin())).abs() < 1e-15);
}

#[test]
fn two_class_loss_closed_form() {
    let c = cfg(2.0, 0.0, 1, 0, 0.0, 2);
    let w = weights(&[[1.0, 0.0], [0.0, 1.0]], 1);
    let l = loss(&[3.0, 0.0], &[0], &w, &c).unwrap();
    assert!((l - 0.1269280110429726).abs() < 1e-12, "{l}");
}

#[test]
fn inter_topk_penalizes_hardest_negative_only() {
    let c = cfg(1.0, 0.0, 1, 1, 0.1, 3);
    let cos = [0.3f64, 0.9, 0.1];
    let logits = aam_logits(&cos, 0, &c).unwrap();
    let adj = inter_topk_adjust(&logits, &cos, 0, &c);
    assert!((adj[1] - 0.9390201261854147).abs() < 1e-12, "{}", adj[1]);
    assert_eq!(adj[0], logits[0]);
    assert_eq!(adj[2], logits[2]);
}

#[test]
fn inter_topk_identity_cases() {
    let cos = [0.3, 0.9, 0.1, 0.8];
    for c in [cfg(5.0, 0.2, 1, 0, 0.1, 4), cfg(5.0, 0.2, 1, 3, 0.0, 4)] {
        let logits = aam_logits(&cos, 2, &c).unwrap();
        assert_eq!(inter_topk_adjust(&logits, &cos, 2, &c), logits);
    }
}

#[test]
fn hardest_negative_ties_prefer_lower_index() {
    assert_eq!(hardest_negatives(&[0.5, 0.7, 0.7, 0.7], 1, 2), vec![2, 3]);
    assert_eq!(hardest_negatives(&[0.5, 0.7, 0.7, 0.7], 0, 2), vec![1, 2]);
}

#[test]
fn cross_entropy_cases() {
    let u = cross_entropy(&[0.3f64; 5], 2).unwrap();
    assert!((u - 5f64.ln()).abs() < 1e-14);
    assert!(cross_entropy(&[1e3, 0.0, 0.0], 0).unwrap() < 1e-300);
    let l = cross_entropy(&[2.0f64, 0.0], 0).unwrap();
    assert!((l - 0.1269280110429726).abs() < 1e-15);
}

#[test]
fn reduces_to_scaled_softmax() {
    let (e, y, w) = random_setup(3, 6, 5, 1, 4);
    let c = cfg(10.0, 0.0, 1, 0, 0.0, 5);
    let got = loss(&e, &y, &w, &c).unwrap();
    let mut want = 0.0;
    for (row, &lab) in e.chunks(4).zip(&y) {
        let ne = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let logits: Vec<f64> = (0..5)
            .map(|j| {
                let r = &w.tensor().data()[j * 4..j * 4 + 4];
                let nr = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                10.0 * row.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / (ne * nr)
            })
            .collect();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        want += z.ln() - logits[lab];
    }
    want /= 6.0;
    assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
}

#[test]
fn single_subcenter_equals_aam() {
    let (e, y, w) = random_setup(5, 4, 6, 1, 3);
    let c = cfg(30.0, 0.2, 1, 0, 0.0, 6);
    let got = loss(&e, &y, &w, &c).unwrap();
    let mut want = 0.0;
    for (row, &lab) in e.chunks(3).zip(&y) {
        let ne = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos: Vec<f64> = (0..6)
            .map(|j| {
                let r = &w.tensor().data()[j * 3..j * 3 + 3];
                row.iter().zip(r).map(|(a, b)| a * b).sum::<f64>() / ne
            })
            .collect();
        let mut logits: Vec<f64> = cos.iter().map(|c| 30.0 * c).collect();
        logits[lab] = 30.0 * (cos[lab].acos() + 0.2).cos();
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        want += z.ln() - logits[lab];
    }
    want /= 4.0;
    assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
}

#[test]
fn graph_loss_gradients() {
    let (e, y, w) = random_setup(8, 4, 6, 3, 5);
    let c = cfg(30.0, 0.2, 3, 2, 0.1, 6);
    let points = [
        Tensor::new(vec![4, 5], e).unwrap(),
        w.into_tensor(),
    ];
    let err = grad_check(|g, v| loss_graph(g, v[0], v[1], &y, &c), &points, 1e-5).unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn invalid_configs_are_rejected() {
    assert!(cfg(0.0, 0.2, 1, 0, 0.0, 3).validate().is_err());
    assert!(cfg(1.0, 1.6, 1, 0, 0.0, 3).validate().is_err());
    assert!(cfg(1.0, 0.2, 0, 0, 0.0, 3).validate().is_err());
    assert!(cfg(1.0, 0.2, 1, 3, 0.0, 3).validate().is_err());
    assert!(LossConfig {
        num_classes: 20,
        ..LossConfig::default()
    }
    .validate()
    .is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn graph_matches_reference(seed in 0u64..10_000, k in 1usize..4, topk in 0usize..3) {
        let (e, y, w) = random_setup(seed, 5, 4, k, 3);
        let c = cfg(20.0, 0.25, k, topk, 0.1, 4);
        let want = loss(&e, &y, &w, &c).unwrap();
        let mut g = Graph::new();
        let ev = g.constant(Tensor::new(vec![5, 3], e).unwrap());
        let wv = g.constant(w.into_tensor());
        let out = loss_graph(&mut g, ev, wv, &y, &c).unwrap();
        prop_assert!((g.value(out).item() - want).abs() <= 1e-10);
    }

    #[test]
    fn loss_ignores_embedding_scale(seed in 0u64..10_000, scale in 1e-3f64..1e3) {
        let (e, y, w) = random_setup(seed, 3, 5, 3, 4);
        let c = cfg(30.0, 0.2, 3, 2, 0.1, 5);
        let scaled: Vec<f64> = e.iter().map(|v| v * scale).collect();
        let a = loss(&e, &y, &w, &c).unwrap();
        let b = loss(&scaled, &y, &w, &c).unwrap();
        prop_assert!((a - b).abs() <= 1e-10, "{} vs {}", a, b);
    }

    #[test]
    fn loss_non_decreasing_in_margin(seed in 0u64..10_000, m1 in 0.0f64..1.5, m2 in 0.0f64..1.5) {
        let (e, y, w) = random_setup(seed, 3, 5, 2, 4);
        let (lo, hi) = if m1 <= m2 { (m1, m2) } else { (m2, m1) };
        let a = loss(&e, &y, &w, &cfg(30.0, lo, 2, 1, 0.1, 5)).unwrap();
        let b = loss(&e, &y, &w, &cfg(30.0, hi, 2, 1, 0.1, 5)).unwrap();
        prop_assert!(b >= a - 1e-12, "m {} -> {}, m {} -> {}", lo, a, hi, b);
    }

    #[test]
    fn logits_bounded_by_scale(seed in 0u64..10_000, m in 0.0f64..1.5, mi in 0.0f64..0.5) {
        let (e, y, w) = random_setup(seed, 1, 6, 2, 4);
        let c = cfg(30.0, m, 2, 3, mi, 6);
        let cos = subcenter_cosines(&e, &w).unwrap();
        let logits = aam_logits(&cos, y[0], &c).unwrap();
        let adj = inter_topk_adjust(&logits, &cos, y[0], &c);
        let target_guarded = cos[y[0]] <= -m.cos();
        for (j, v) in adj.iter().enumerate() {
            if j == y[0] && target_guarded {
                continue;
            }
            prop_assert!(v.abs() <= 30.0 + 1e-12);
        }
    }
}
