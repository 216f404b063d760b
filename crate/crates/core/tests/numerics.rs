use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sscl_core::contrastive::{loss_hne, loss_tcm, LossConfig, NegativeStrategy};
use sscl_core::numerics::{grad_check, Graph, Tensor, Var, LAYER_NORM_EPS};
use sscl_core::Error;

fn rows(r: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(r).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Scalar read-out with fixed random weights so gradients are not trivially uniform.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> sscl_core::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(x), &mut rng));
    let p = g.mul(x, w)?;
    g.sum(p)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::identity(2));
    let a = g.constant(rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
    let p = g.matmul(i, a).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
    let r = g.constant(rows(&[vec![1.0, 2.0]]));
    let c = g.constant(rows(&[vec![3.0], vec![4.0]]));
    let d = g.matmul(r, c).unwrap();
    assert_eq!(g.value(d).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_is_b_transposed_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
    let mut g = Graph::new();
    let av = g.param(a);
    let bv = g.param(b.clone());
    let p = g.matmul(av, bv).unwrap();
    let s = g.sum(p).unwrap();
    let grads = g.backward(s).unwrap();
    let ga = grads.get(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let expect: f64 = (0..2).map(|j| b.at(&[k, j])).sum();
            assert!((ga.at(&[i, k]) - expect).abs() < 1e-14);
        }
    }
    let err = grad_check(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            g.sum(p)
        },
        &[random(&[3, 4], &mut rng), b],
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(rows(&[vec![0.0, 0.0], vec![1000.0, 0.0], vec![1.0, 2.0]]));
    let s = g.softmax(x).unwrap();
    let v = g.value(s);
    assert_eq!(v.row(0), &[0.5, 0.5]);
    assert_eq!(v.row(1)[0], 1.0);
    assert!(v.row(1)[1] < 1e-300);
    let x3 = g.constant(rows(&[vec![1.0, 2.0, 3.0]]));
    let s3 = g.softmax(x3).unwrap();
    for (got, want) in g
        .value(s3)
        .data()
        .iter()
        .zip([0.09003057, 0.24472847, 0.66524096])
    {
        assert!((got - want).abs() < 1e-8);
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let x = g.constant(rows(&[vec![2.0, 2.0, 2.0], vec![1.0, 3.0, 2.0]]));
    let gain = g.constant(Tensor::filled(&[3], 1.0));
    let bias = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gain, bias, LAYER_NORM_EPS).unwrap();
    assert!(g.value(y).row(0).iter().all(|&v| v == 0.0));

    let x2 = g.constant(rows(&[vec![1.0, 3.0]]));
    let gain2 = g.constant(Tensor::filled(&[2], 1.0));
    let bias2 = g.constant(Tensor::zeros(&[2]));
    let y2 = g.layer_norm(x2, gain2, bias2, 1e-12).unwrap();
    let r = g.value(y2).row(0);
    assert!((r[0] + 1.0).abs() < 1e-10 && (r[1] - 1.0).abs() < 1e-10);
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let inputs = [
        random(&[3, 5], &mut rng),
        random(&[5], &mut rng),
        random(&[5], &mut rng),
    ];
    let err = grad_check(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)?;
            weighted_sum(g, y, 9)
        },
        &inputs,
        1e-6,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn grad_check_examples() {
    let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
    let err = grad_check(
        |g, v| {
            let s = g.mul(v[0], v[0])?;
            g.sum(s)
        },
        std::slice::from_ref(&x),
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-8);
    let mut g = Graph::new();
    let xv = g.param(x);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq).unwrap();
    assert_eq!(g.backward(s).unwrap().get(xv).unwrap().data(), &[2.0, 4.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (a, p, n) = (
        random(&[4, 8], &mut rng),
        random(&[4, 8], &mut rng),
        random(&[4, 8], &mut rng),
    );
    let tcm = grad_check(
        |g, v| loss_tcm(g, v[0], v[1], 0.5),
        &[a.clone(), p.clone()],
        1e-6,
    )
    .unwrap();
    assert!(tcm <= 1e-4, "{tcm}");
    let cfg = LossConfig {
        temperature: 0.5,
        strategy: NegativeStrategy::single_layer(0),
        ..LossConfig::default()
    };
    let hne = grad_check(
        |g, v| loss_hne(g, v[0], v[1], &[v[2]], 0.5, &cfg),
        &[a, p, n],
        1e-6,
    )
    .unwrap();
    assert!(hne <= 1e-4, "{hne}");
}

#[test]
fn grad_check_rejects_non_finite_objective_and_bad_step() {
    let x = Tensor::vector(vec![1.0]).unwrap();
    let r = grad_check(
        |g, v| {
            let s = g.scale(v[0], f64::INFINITY)?;
            g.sum(s)
        },
        std::slice::from_ref(&x),
        1e-6,
    );
    assert!(r.is_err());
    assert!(matches!(
        grad_check(|g, v| g.sum(v[0]), &[x], 1e-2),
        Err(Error::Config(_))
    ));
}

/// Every differentiable primitive against central differences on random inputs in [-1, 1].
#[test]
fn primitives_match_finite_differences() {
    type Build = fn(&mut Graph, &[Var]) -> sscl_core::Result<Var>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            g.matmul(v[0], v[1])
        }),
        ("matmul_nt", vec![vec![3, 4], vec![2, 4]], |g, v| {
            g.matmul_nt(v[0], v[1])
        }),
        ("linear", vec![vec![5, 3], vec![3, 4], vec![4]], |g, v| {
            g.linear(v[0], v[1], Some(v[2]))
        }),
        ("add", vec![vec![2, 3], vec![2, 3]], |g, v| {
            g.add(v[0], v[1])
        }),
        ("sub", vec![vec![2, 3], vec![2, 3]], |g, v| {
            g.sub(v[0], v[1])
        }),
        ("mul", vec![vec![2, 3], vec![2, 3]], |g, v| {
            g.mul(v[0], v[1])
        }),
        ("scale", vec![vec![2, 3]], |g, v| g.scale(v[0], -1.7)),
        ("gelu", vec![vec![4, 3]], |g, v| g.gelu(v[0])),
        ("softmax", vec![vec![3, 4]], |g, v| g.softmax(v[0])),
        ("logsumexp", vec![vec![3, 4]], |g, v| g.logsumexp_rows(v[0])),
        ("mean", vec![vec![3, 4]], |g, v| g.mean(v[0])),
        ("normalize_rows", vec![vec![3, 4]], |g, v| {
            g.normalize_rows(v[0])
        }),
        ("row_dot", vec![vec![3, 4], vec![3, 4]], |g, v| {
            g.row_dot(v[0], v[1])
        }),
        ("diag", vec![vec![3, 3]], |g, v| g.diag(v[0])),
        ("concat_cols", vec![vec![2, 3], vec![2, 1]], |g, v| {
            g.concat_cols(&[v[0], v[1]])
        }),
        ("gather_rows", vec![vec![4, 3]], |g, v| {
            g.gather_rows(v[0], &[2, 0, 2])
        }),
        (
            "attention",
            vec![vec![5, 4], vec![5, 4], vec![5, 4]],
            |g, v| g.attention(v[0], v[1], v[2], &[2, 3], 2, None),
        ),
        (
            "attention_dropout",
            vec![vec![3, 4], vec![3, 4], vec![3, 4]],
            |g, v| {
                let keep = (0..18)
                    .map(|i| if i % 5 == 0 { 0.0 } else { 1.25 })
                    .collect();
                g.attention(v[0], v[1], v[2], &[3], 2, Some(keep))
            },
        ),
        ("pad_packed", vec![vec![5, 2]], |g, v| {
            g.pad_packed(v[0], &[2, 3], 3)
        }),
        ("masked_mean", vec![vec![5, 2]], |g, v| {
            let p = g.pad_packed(v[0], &[2, 3], 3)?;
            g.masked_mean(p, &[2, 3])
        }),
        ("select_position", vec![vec![5, 2]], |g, v| {
            let p = g.pad_packed(v[0], &[2, 3], 3)?;
            g.select_position(p, 0)
        }),
        ("reshape", vec![vec![2, 3]], |g, v| g.reshape(v[0], &[3, 2])),
    ];
    for (name, shapes, build) in cases {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err = grad_check(
                |g, v| {
                    let y = build(g, v)?;
                    weighted_sum(g, y, 100 + seed)
                },
                &inputs,
                1e-6,
            )
            .unwrap();
            assert!(err <= 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y).unwrap();
    // d/dx (x * stop(x)) = stop(x).
    assert_eq!(g.backward(s).unwrap().get(x).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn repeated_forward_backward_is_bitwise_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let a = g.param(random(&[6, 8], &mut rng));
        let p = g.param(random(&[6, 8], &mut rng));
        let l = loss_tcm(&mut g, a, p, 0.05).unwrap();
        let grads = g.backward(l).unwrap();
        (
            g.value(l).data().to_vec(),
            grads.get(a).unwrap().data().to_vec(),
            grads.get(p).unwrap().data().to_vec(),
        )
    };
    let (x, y) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&x.0), bits(&y.0));
    assert_eq!(bits(&x.1), bits(&y.1));
    assert_eq!(bits(&x.2), bits(&y.2));
}

#[test]
fn tensor_new_checks_shape_product() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-10.0f64..10.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], data).unwrap());
        let s = g.softmax(x).unwrap();
        for r in 0..3 {
            let row = g.value(s).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn matmul_identity_is_bitwise(data in prop::collection::vec(-1e3f64..1e3, 15)) {
        let a = Tensor::new(vec![5, 3], data).unwrap();
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let i = g.constant(Tensor::identity(3));
        let p = g.matmul(av, i).unwrap();
        prop_assert_eq!(g.value(p).data(), a.data());
    }
}

#[test]
fn matmul_variants_agree_with_naive_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (m, k, n) = (5, 7, 3);
    let a = random(&[m, k], &mut rng);
    let b = random(&[k, n], &mut rng);
    let bt = b.transpose2().unwrap();
    let mut naive = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            naive[i * n + j] = (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
        }
    }
    let mut g = Graph::new();
    let (av, bv, btv) = (g.constant(a), g.constant(b), g.constant(bt));
    let plain = g.matmul(av, bv).unwrap();
    let nt = g.matmul_nt(av, btv).unwrap();
    for out in [plain, nt] {
        for (x, y) in g.value(out).data().iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn normalize_rejects_zero_rows() {
    let mut g = Graph::new();
    let x = g.constant(rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
    assert!(matches!(
        g.normalize_rows(x),
        Err(Error::DegenerateVector(_))
    ));
}

#[test]
fn overflow_is_detected_at_every_position() {
    for n in [1, 7, 8, 9, 23] {
        for i in 0..n {
            let mut data = vec![1.5; n];
            data[i] = 1e308;
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(data).unwrap());
            assert!(
                matches!(g.add(x, x), Err(Error::NonFinite("add"))),
                "n={n} i={i}"
            );
            assert!(
                matches!(g.mul(x, x), Err(Error::NonFinite("mul"))),
                "n={n} i={i}"
            );
        }
    }
}

#[test]
fn gelu_matches_the_tanh_form_and_its_derivative() {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    const A: f64 = 0.044715;
    let xs: Vec<f64> = (0..=4000)
        .map(|i| -40.0 + i as f64 * 0.02)
        .chain([1e-9, -1e-9, 0.0])
        .collect();
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(xs.clone()).unwrap());
    let y = g.gelu(x).unwrap();
    let s = g.sum(y).unwrap();
    let grads = g.backward(s).unwrap();
    let dy = grads.get(x).unwrap().data();
    for (i, &v) in xs.iter().enumerate() {
        let t = (C * (v + A * v * v * v)).tanh();
        let expect = 0.5 * v * (1.0 + t);
        assert!(
            (g.value(y).data()[i] - expect).abs() <= 1e-14 * expect.abs().max(1.0),
            "x={v}"
        );
        let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C * (1.0 + 3.0 * A * v * v);
        assert!((dy[i] - d).abs() < 1e-13, "x={v}: {} vs {d}", dy[i]);
    }
}
