mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscl_core::data::{
    build_vocab, probing_datasets, synth_corpus, synth_sts, ProbeKind, StsPair, Vocabulary,
};
use sscl_core::encoder::{Encoder, EncoderConfig, Pooling};
use sscl_core::evaluation::{
    average_ranks, linear_probe, pearson, predicted_similarities, probe_task, spearman, sts_eval,
    write_report_csv,
};
use sscl_core::Error;

fn setup(seed: u64) -> (Encoder, Vocabulary) {
    let mut text = synth_corpus(200, seed);
    for p in synth_sts(50, seed) {
        text.push_str(&format!("\n{}\n{}", p.sentence_a, p.sentence_b));
    }
    let vocab = build_vocab(&text, 1).unwrap();
    let cfg = EncoderConfig {
        num_layers: 2,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        vocab_size: vocab.len(),
        ..EncoderConfig::default()
    };
    (Encoder::from_seed(cfg, seed).unwrap(), vocab)
}

#[test]
fn spearman_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert!((spearman(&x, &x).unwrap() - 1.0).abs() < 1e-12);
    assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
    assert!(matches!(
        spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]),
        Err(Error::UndefinedCorrelation(_))
    ));
    assert!(matches!(spearman(&[1.0], &[1.0]), Err(Error::Input(_))));
    assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
    assert!(spearman(&[1.0, f64::NAN], &[1.0, 2.0]).is_err());
}

#[test]
fn ties_get_average_ranks() {
    assert_eq!(
        average_ranks(&[10.0, 20.0, 10.0, 30.0]),
        vec![1.5, 3.0, 1.5, 4.0]
    );
    assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn identical_pairs_surface_undefined_correlation() {
    let (enc, vocab) = setup(1);
    let pairs: Vec<StsPair> = synth_sts(20, 1)
        .into_iter()
        .enumerate()
        .map(|(i, p)| StsPair::new(p.sentence_a.clone(), p.sentence_a, (i % 5) as f64).unwrap())
        .collect();
    let predicted = predicted_similarities(&enc, &vocab, &pairs, 2).unwrap();
    assert!(predicted.iter().all(|&c| c == 1.0));
    assert!(matches!(
        sts_eval(&enc, &vocab, &pairs, None),
        Err(Error::UndefinedCorrelation(_))
    ));
}

#[test]
fn sts_eval_defaults_to_the_last_layer_and_is_deterministic() {
    let (enc, vocab) = setup(2);
    let pairs = synth_sts(50, 2);
    let default = sts_eval(&enc, &vocab, &pairs, None).unwrap();
    assert_eq!(default.layer, 2);
    assert_eq!(default.n_pairs, 50);
    assert_eq!(default.pooling, Pooling::Avg);
    let last = sts_eval(&enc, &vocab, &pairs, Some(2)).unwrap();
    assert_eq!(default.spearman.to_bits(), last.spearman.to_bits());
    assert_eq!(
        sts_eval(&enc, &vocab, &pairs, None)
            .unwrap()
            .spearman
            .to_bits(),
        default.spearman.to_bits()
    );
    assert!((-1.0..=1.0).contains(&default.spearman));
    let embedding_layer = sts_eval(&enc, &vocab, &pairs, Some(0)).unwrap();
    assert_eq!(embedding_layer.layer, 0);
    assert!(sts_eval(&enc, &vocab, &pairs, Some(3)).is_err());
    assert!(sts_eval(&enc, &vocab, &pairs[..1], None).is_err());
}

fn blobs(n: usize, seed: u64, shuffle: bool) -> Vec<(Vec<f64>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let y = i % 2;
            let centre = if y == 0 { -2.0 } else { 2.0 };
            let x = (0..4).map(|_| centre + rng.gen_range(-1.0..1.0)).collect();
            let label = if shuffle { rng.gen_range(0..2) } else { y };
            (x, label)
        })
        .collect()
}

#[test]
fn probe_separates_blobs() {
    let r = linear_probe(&blobs(200, 1, false), &blobs(100, 2, false)).unwrap();
    assert!(r.accuracy >= 0.95, "{r:?}");
    assert_eq!((r.n_train, r.n_test), (200, 100));
}

#[test]
fn probe_on_shuffled_labels_is_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = |n: usize, rng: &mut ChaCha8Rng| -> Vec<(Vec<f64>, usize)> {
        (0..n)
            .map(|_| {
                (
                    (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                    rng.gen_range(0..2),
                )
            })
            .collect()
    };
    let train = noise(400, &mut rng);
    let test = noise(400, &mut rng);
    let r = linear_probe(&train, &test).unwrap();
    assert!((r.accuracy - 0.5).abs() <= 0.1, "{r:?}");
    let shuffled = linear_probe(&blobs(400, 3, true), &blobs(400, 4, true)).unwrap();
    assert!((shuffled.accuracy - 0.5).abs() <= 0.1, "{shuffled:?}");
}

#[test]
fn probe_memorization_bound() {
    let train = blobs(60, 5, true);
    let r = linear_probe(&train, &train).unwrap();
    assert!(r.accuracy >= r.train_accuracy);
}

#[test]
fn probe_rejects_single_class_and_bad_features() {
    let one: Vec<(Vec<f64>, usize)> = blobs(20, 6, false)
        .into_iter()
        .map(|(x, _)| (x, 0))
        .collect();
    assert!(matches!(linear_probe(&one, &one), Err(Error::Input(_))));
    assert!(matches!(linear_probe(&[], &[]), Err(Error::Input(_))));
    let ragged = vec![(vec![1.0, 2.0], 0), (vec![1.0], 1)];
    assert!(matches!(
        linear_probe(&ragged, &ragged),
        Err(Error::Input(_))
    ));
}

#[test]
fn probe_task_reports_its_task() {
    let (enc, vocab) = setup(3);
    let rows = probing_datasets(ProbeKind::SentLen, 80, 3);
    let (train, test) = rows.split_at(60);
    let r = probe_task(&enc, &vocab, ProbeKind::SentLen, train, test).unwrap();
    assert_eq!(r.task, Some(ProbeKind::SentLen));
    assert!((0.0..=1.0).contains(&r.accuracy));
    assert_eq!(r.n_test, 20);
}

#[test]
fn report_csv_schema() {
    let mut buf = Vec::new();
    write_report_csv(&mut buf, &[("spearman", 0.5), ("n_pairs", 10.0)], "abc", 7).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "metric,value,config_hash,seed\nspearman,0.5,abc,7\nn_pairs,10,abc,7\n"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn spearman_matches_oracle_and_is_invariant(
        seed in 0u64..10_000,
        n in 3usize..40,
        levels in 2u32..10,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse levels force ties.
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        prop_assume!(x.iter().any(|&v| v != x[0]));
        let s = spearman(&x, &y).unwrap();
        prop_assert!((s - common::spearman(&x, &y)).abs() < 1e-12);
        prop_assert!((s - spearman(&y, &x).unwrap()).abs() < 1e-12);
        let ex: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let ay: Vec<f64> = y.iter().map(|v| 3.0 * v + 7.0).collect();
        prop_assert!((s - spearman(&ex, &ay).unwrap()).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}
