use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscl_core::contrastive::{
    build_negatives, cosine, loss_hne, loss_tcm, loss_tcm_with, Denominator, LossConfig,
    NegativeKind, NegativeStrategy,
};
use sscl_core::encoder::{SentenceViews, ViewTag};
use sscl_core::numerics::{grad_check, Graph, Tensor, Var};
use sscl_core::Error;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn tcm(a: &Tensor, p: &Tensor, tau: f64) -> f64 {
    let mut g = Graph::new();
    let (av, pv) = (g.constant(a.clone()), g.constant(p.clone()));
    let l = loss_tcm(&mut g, av, pv, tau).unwrap();
    g.value(l).item().unwrap()
}

fn hne(a: &Tensor, p: &Tensor, negs: &[Tensor], tau: f64) -> f64 {
    let mut g = Graph::new();
    let (av, pv) = (g.constant(a.clone()), g.constant(p.clone()));
    let nv: Vec<Var> = negs.iter().map(|n| g.constant(n.clone())).collect();
    let l = loss_hne(&mut g, av, pv, &nv, tau, &LossConfig::default()).unwrap();
    g.value(l).item().unwrap()
}

/// Direct transcription of the InfoNCE formula with per-anchor layer negatives.
fn oracle(a: &Tensor, p: &Tensor, negs: &[Tensor], tau: f64) -> f64 {
    let n = a.outer_rows();
    let mut total = 0.0;
    for i in 0..n {
        let pos = (cosine(a.row(i), p.row(i)).unwrap() / tau).exp();
        let mut denom: f64 = (0..n)
            .map(|j| (cosine(a.row(i), p.row(j)).unwrap() / tau).exp())
            .sum();
        denom += negs
            .iter()
            .map(|m| (cosine(a.row(i), m.row(i)).unwrap() / tau).exp())
            .sum::<f64>();
        total -= (pos / denom).ln();
    }
    total / n as f64
}

#[test]
fn tcm_examples() {
    let single = Tensor::from_rows(&[vec![0.2, -0.7, 1.1]]).unwrap();
    let other = Tensor::from_rows(&[vec![-3.0, 0.1, 0.4]]).unwrap();
    assert!(tcm(&single, &other, 0.05).abs() < 1e-12);
    let same = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
    assert!((tcm(&same, &same, 0.05) - std::f64::consts::LN_2).abs() < 1e-12);
    let basis = Tensor::identity(2);
    assert!((tcm(&basis, &basis, 1.0) - 0.313262).abs() < 1e-6);
}

#[test]
fn hne_examples() {
    let a = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
    let n = Tensor::from_rows(&[vec![0.0, 3.0]]).unwrap();
    assert!((hne(&a, &a, &[n], 1.0) - 0.313262).abs() < 1e-6);
    let p = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
    assert!((hne(&a, &p, std::slice::from_ref(&p), 0.05) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn losses_match_the_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in [1, 3, 8] {
        let (a, p) = (random(n, 5, &mut rng), random(n, 5, &mut rng));
        let negs = vec![random(n, 5, &mut rng), random(n, 5, &mut rng)];
        for tau in [0.05, 0.3, 1.0] {
            assert!((tcm(&a, &p, tau) - oracle(&a, &p, &[], tau)).abs() < 1e-10);
            assert!((hne(&a, &p, &negs, tau) - oracle(&a, &p, &negs, tau)).abs() < 1e-10);
        }
    }
}

#[test]
fn hne_exceeds_tcm_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(1..=6);
        let (a, p, m) = (
            random(n, 4, &mut rng),
            random(n, 4, &mut rng),
            random(n, 4, &mut rng),
        );
        let tau = rng.gen_range(0.05..1.0);
        assert!(hne(&a, &p, &[m], tau) > tcm(&a, &p, tau));
    }
}

#[test]
fn temperature_sharpens_the_loss() {
    // A correctly ranked batch gets a lower loss at lower temperature.
    let a = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.1, 1.0], vec![-1.0, 0.2]]).unwrap();
    let mut last = f64::INFINITY;
    for tau in [1.0, 0.5, 0.1, 0.05, 0.01] {
        let l = tcm(&a, &a, tau);
        assert!(l < last, "tau {tau}: {l} !< {last}");
        last = l;
    }
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inputs = vec![
        random(4, 8, &mut rng),
        random(4, 8, &mut rng),
        random(4, 8, &mut rng),
    ];
    for tau in [0.05, 1.0] {
        let e = grad_check(|g, x| loss_tcm(g, x[0], x[1], tau), &inputs[..2], 1e-4).unwrap();
        assert!(e <= 1e-4, "tcm tau {tau}: {e}");
        for denominator in [Denominator::Positives, Denominator::Anchors] {
            for cross in [false, true] {
                let cfg = LossConfig {
                    denominator,
                    cross_batch_intermediate: cross,
                    ..LossConfig::default()
                };
                let e = grad_check(
                    |g, x| loss_hne(g, x[0], x[1], &[x[2]], tau, &cfg),
                    &inputs,
                    1e-4,
                )
                .unwrap();
                assert!(
                    e <= 1e-4,
                    "hne tau {tau} {denominator:?} cross {cross}: {e}"
                );
            }
        }
        let e = grad_check(
            |g, x| loss_tcm_with(g, x[0], x[1], tau, Denominator::Anchors),
            &inputs[..2],
            1e-4,
        )
        .unwrap();
        assert!(e <= 1e-4, "tcm anchors tau {tau}: {e}");
    }
}

#[test]
fn detached_negatives_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::new();
    let a = g.param(random(3, 4, &mut rng));
    let p = g.param(random(3, 4, &mut rng));
    let m = g.param(random(3, 4, &mut rng));
    let cfg = LossConfig {
        detach_negatives: true,
        ..LossConfig::default()
    };
    let l = loss_hne(&mut g, a, p, &[m], 0.05, &cfg).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads
        .get(m)
        .is_none_or(|t| t.data().iter().all(|&x| x == 0.0)));
    assert!(grads.get(a).is_some());
}

#[test]
fn losses_reject_bad_arguments() {
    let a = Tensor::identity(2);
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(
        loss_tcm(&mut g, av, bad, 0.05),
        Err(Error::Dimension { .. })
    ));
    assert!(matches!(
        loss_tcm(&mut g, av, av, 0.0),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        loss_tcm(&mut g, av, av, f64::NAN),
        Err(Error::Config(_))
    ));
    assert!(loss_hne(&mut g, av, av, &[], 0.05, &LossConfig::default()).is_err());
    assert!(matches!(
        loss_hne(&mut g, av, av, &[bad], 0.05, &LossConfig::default()),
        Err(Error::Dimension { .. })
    ));
}

fn views(g: &mut Graph, layers: usize, rng: &mut ChaCha8Rng, tag: ViewTag) -> SentenceViews {
    SentenceViews {
        per_layer: (0..=layers)
            .map(|_| g.constant(random(4, 6, rng)))
            .collect(),
        tag,
    }
}

#[test]
fn build_negatives_selects_layers_in_descending_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let v = views(&mut g, 4, &mut rng, ViewTag::Anchor);
    assert_eq!(
        build_negatives(&v, &NegativeStrategy::single_layer(2)).unwrap(),
        vec![v.per_layer[2]]
    );
    let prog = NegativeStrategy::progressive(3, 4).unwrap();
    assert_eq!(prog.kind(), NegativeKind::Progressive);
    assert_eq!(
        build_negatives(&v, &prog).unwrap(),
        vec![v.per_layer[3], v.per_layer[2], v.per_layer[1]]
    );
    assert!(matches!(
        build_negatives(&v, &NegativeStrategy::single_layer(4)),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        build_negatives(&v, &NegativeStrategy::single_layer(9)),
        Err(Error::Config(_))
    ));
    assert_eq!(
        NegativeStrategy::single_layer(3).to_string(),
        "single_layer:3"
    );
    assert_eq!(prog.to_string(), "progressive:3");
    assert_eq!(NegativeStrategy::none().to_string(), "none");
}

#[test]
fn empty_strategy_computes_exactly_the_in_batch_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let a = views(&mut g, 3, &mut rng, ViewTag::Anchor);
    let p = views(&mut g, 3, &mut rng, ViewTag::Positive);
    let plain = loss_tcm(&mut g, a.last(), p.last(), 0.05).unwrap();
    for strategy in [
        NegativeStrategy::none(),
        NegativeStrategy::progressive(0, 3).unwrap(),
    ] {
        let cfg = LossConfig {
            strategy,
            ..LossConfig::default()
        };
        let l = cfg.compute(&mut g, &a, &p).unwrap();
        assert_eq!(
            g.value(l).item().unwrap().to_bits(),
            g.value(plain).item().unwrap().to_bits()
        );
    }
    let sscl = LossConfig {
        strategy: NegativeStrategy::single_layer(2),
        ..LossConfig::default()
    };
    let l = sscl.compute(&mut g, &a, &p).unwrap();
    let direct = loss_hne(&mut g, a.last(), p.last(), &[a.per_layer[2]], 0.05, &sscl).unwrap();
    assert_eq!(g.value(l), g.value(direct));
    assert!(LossConfig::default().validate(3).is_ok());
    assert!(sscl.validate(2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_pair_tcm_is_zero(v in prop::collection::vec(-1.0f64..1.0, 2..6), seed in 0u64..100) {
        prop_assume!(v.iter().map(|x| x * x).sum::<f64>() > 1e-3);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::from_rows(std::slice::from_ref(&v)).unwrap();
        let p = random(1, v.len(), &mut rng);
        prop_assert!(tcm(&a, &p, 0.05).abs() < 1e-12);
    }

    #[test]
    fn losses_are_scale_invariant(seed in 0u64..1000, s in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, p, m) = (random(4, 5, &mut rng), random(4, 5, &mut rng), random(4, 5, &mut rng));
        let scaled = a.map(|x| x * s);
        prop_assert!((tcm(&a, &p, 0.1) - tcm(&scaled, &p, 0.1)).abs() < 1e-10);
        prop_assert!((hne(&a, &p, std::slice::from_ref(&m), 0.1) - hne(&scaled, &p, &[m.map(|x| x * s)], 0.1)).abs() < 1e-10);
    }

    #[test]
    fn losses_are_invariant_to_joint_permutation(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, p, m) = (random(5, 3, &mut rng), random(5, 3, &mut rng), random(5, 3, &mut rng));
        let order = [3usize, 0, 4, 1, 2];
        let perm = |t: &Tensor| Tensor::from_rows(&order.iter().map(|&i| t.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        prop_assert!((tcm(&a, &p, 0.05) - tcm(&perm(&a), &perm(&p), 0.05)).abs() < 1e-12);
        prop_assert!((hne(&a, &p, std::slice::from_ref(&m), 0.05) - hne(&perm(&a), &perm(&p), &[perm(&m)], 0.05)).abs() < 1e-12);
    }
}

#[test]
fn zero_rows_are_degenerate() {
    let a = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
    let mut g = Graph::new();
    let av = g.constant(a);
    assert!(matches!(
        loss_tcm(&mut g, av, av, 0.05),
        Err(Error::DegenerateVector(_))
    ));
    assert!(matches!(
        cosine(&[0.0, 0.0], &[1.0, 1.0]),
        Err(Error::DegenerateVector(_))
    ));
}

#[test]
fn cosine_examples() {
    assert_eq!(cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!((cosine(&[1.0, 2.0], &[2.0, 1.0]).unwrap() - 0.8).abs() < 1e-15);
}

#[test]
fn strategy_constructors_validate_layers() {
    assert_eq!(
        NegativeStrategy::progressive(2, 12).unwrap().layers(),
        &[11, 10]
    );
    assert!(NegativeStrategy::progressive(0, 4).unwrap().is_empty());
    assert_eq!(
        NegativeStrategy::progressive(4, 4).unwrap().layers(),
        &[3, 2, 1, 0]
    );
    assert!(NegativeStrategy::progressive(5, 4).is_err());
    assert!(NegativeStrategy::single_layer(4).validate(4).is_err());
    assert!(NegativeStrategy::single_layer(3).validate(4).is_ok());
}
