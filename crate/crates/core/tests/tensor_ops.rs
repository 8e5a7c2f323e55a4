use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seqdg::tensor::{
    grad_check, AttentionSegment, GradCheckConfig, Graph, OpKind, Tensor, TensorError, Var,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Projects an op output onto fixed random weights so every output entry
/// contributes a distinct amount to the scalar.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = random(&mut rng, g.value(y).shape());
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn strict() -> GradCheckConfig {
    GradCheckConfig {
        h: 1e-5,
        tol: 1e-6,
        floor: 1e-6,
    }
}

fn check_op<F>(name: &str, shapes: &[&[usize]], mut build: F)
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<(String, Tensor)> = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("{name}.{i}"), random(&mut rng, s)))
            .collect();
        let report = grad_check(
            &params,
            |g, vars| {
                let y = build(g, vars)?;
                if g.value(y).len() == 1 {
                    Ok(y)
                } else {
                    project(g, y, seed)
                }
            },
            &strict(),
        )
        .unwrap();
        assert!(
            report.passed(),
            "{name} seed {seed}: max rel err {} in {:?}",
            report.max_rel_err,
            report.failing_params()
        );
    }
}

#[test]
fn matmul_small_cases() {
    let mut g = Graph::new();
    let i2 = g.constant(Tensor::identity(2));
    let m = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let out = g.matmul(i2, m).unwrap();
    assert_eq!(g.value(out).values(), &[1.0, 2.0, 3.0, 4.0]);

    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]).unwrap());
    let b = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 1]);
    assert_eq!(g.value(out).values(), &[11.0]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    match g.matmul(a, b) {
        Err(TensorError::Shape { left, right, .. }) => {
            assert_eq!(left, vec![2, 3]);
            assert_eq!(right, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_gradients_match_finite_differences() {
    check_op("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn softmax_reference_values() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    assert_eq!(g.value(y).values(), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(vec![1000.0; 3]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    for v in g.value(y).values() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    // 40-digit reference evaluation.
    let expected = [
        0.090_030_573_170_380_457_998_022_1,
        0.244_728_471_054_797_652_472_959_6,
        0.665_240_955_774_821_889_529_018_3,
    ];
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.softmax_rows(x).unwrap();
    for (v, e) in g.value(y).values().iter().zip(expected) {
        assert!((v - e).abs() < 1e-12, "{v} vs {e}");
    }
}

#[test]
fn softmax_gradients_match_finite_differences() {
    check_op("softmax", &[&[3, 5]], |g, v| g.softmax_rows(v[0]));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 1..12), 1..6)
    ) {
        let cols = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied().cycle().take(cols)).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(rows.len(), cols, data).unwrap());
        let y = g.softmax_rows(x).unwrap();
        for row in g.value(y).values().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn layer_norm_reference_cases() {
    let mut g = Graph::new();
    let gain = g.constant(Tensor::filled(&[4], 1.0));
    let bias = g.constant(Tensor::zeros(&[4]));
    let x = g.constant(Tensor::filled(&[1, 4], 3.7));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).values().iter().all(|&v| v == 0.0));

    let gain = g.constant(Tensor::filled(&[2], 1.0));
    let bias = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::vector(vec![1.0, 3.0]).unwrap());
    let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
    assert_eq!(g.value(y).values(), &[-1.0, 1.0]);
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut g = Graph::new();
    let x = g.constant(random(&mut rng, &[2, 8]));
    let gain = g.constant(Tensor::filled(&[8], 1.0));
    let bias = g.constant(Tensor::zeros(&[8]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    for row in g.value(y).values().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-6);
    }
}

#[test]
fn layer_norm_gradients_match_finite_differences() {
    check_op("layer_norm", &[&[3, 6], &[6], &[6]], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn loss_reference_values() {
    let mut g = Graph::new();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = g.constant(random(&mut rng, &[3, 4]));
    let l = g.mse(x, x).unwrap();
    assert_eq!(g.value(l).values(), &[0.0]);

    let logits = g.constant(Tensor::vector(vec![0.0, 0.0]).unwrap());
    let l = g.cross_entropy(logits, &[0]).unwrap();
    assert!((g.value(l).values()[0] - std::f64::consts::LN_2).abs() < 1e-15);

    let logits = g.constant(Tensor::vector(vec![2.0, 1.0, 0.0]).unwrap());
    let l = g.cross_entropy(logits, &[1]).unwrap();
    // 40-digit reference evaluation.
    let expected = 1.407_605_964_444_380_304_482_92;
    assert!((g.value(l).values()[0] - expected).abs() < 1e-12);
}

#[test]
fn loss_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(g.mse(a, b), Err(TensorError::Shape { .. })));
    assert!(matches!(
        g.cross_entropy(a, &[0, 3]),
        Err(TensorError::ClassIndex { index: 3, classes: 3, .. })
    ));
}

#[test]
fn loss_gradients_match_finite_differences() {
    check_op("mse", &[&[3, 4], &[3, 4]], |g, v| g.mse(v[0], v[1]));
    check_op("cross_entropy", &[&[4, 5]], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]));
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    check_op("add", &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]));
    check_op("mul", &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]));
    check_op("add_bias", &[&[4, 3], &[3]], |g, v| g.add_bias(v[0], v[1]));
    check_op("scale", &[&[2, 3]], |g, v| g.scale(v[0], -0.7));
    check_op("gelu", &[&[3, 5]], |g, v| g.gelu(v[0]));
    check_op("weighted_sum", &[&[1], &[1]], |g, v| {
        g.weighted_sum(&[(v[0], 0.3), (v[1], 2.0)])
    });
}

#[test]
fn row_plumbing_gradients_match_finite_differences() {
    check_op("gather_rows", &[&[3, 4], &[2, 4]], |g, v| {
        g.gather_rows(&[v[0], v[1]], &[(1, 0), (0, 2), (0, 2), (1, 1), (0, 0)])
    });
    check_op("zero_rows", &[&[4, 3]], |g, v| g.zero_rows(v[0], &[1, 3]));
}

#[test]
fn attention_gradients_match_finite_differences() {
    let segments = [
        AttentionSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 2, v_start: 1 },
        AttentionSegment { q_start: 3, q_len: 2, k_start: 2, k_len: 3, v_start: 0 },
    ];
    check_op("attention", &[&[5, 4], &[5, 4], &[4, 4]], |g, v| {
        g.attention(v[0], v[1], v[2], 2, &segments)
    });
}

#[test]
fn quadratic_grad_check_passes() {
    let params = vec![("theta".to_string(), Tensor::vector(vec![1.0, 2.0]).unwrap())];
    let report = grad_check(
        &params,
        |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        },
        &GradCheckConfig { tol: 1e-8, ..Default::default() },
    )
    .unwrap();
    assert!(report.passed());
    assert!(report.max_rel_err < 1e-8);

    let mut g = Graph::new();
    let theta = g.param(params[0].1.clone());
    let sq = g.mul(theta, theta).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(theta).unwrap(), &[2.0, 4.0]);
}

#[test]
fn grad_check_flags_corrupted_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = vec![
        ("pre_gelu".to_string(), random(&mut rng, &[3, 4])),
        ("post_gelu".to_string(), random(&mut rng, &[4, 2])),
    ];
    let report = grad_check(
        &params,
        |g, v| {
            g.corrupt_backward(OpKind::Gelu);
            let h = g.gelu(v[0])?;
            let y = g.matmul(h, v[1])?;
            project(g, y, 1)
        },
        &strict(),
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failing_params(), vec!["pre_gelu"]);
}

#[test]
fn grad_check_rejects_nondeterministic_objective() {
    let params = vec![("x".to_string(), Tensor::vector(vec![1.0]).unwrap())];
    let mut calls = 0.0;
    let result = grad_check(
        &params,
        |g, v| {
            calls += 1.0;
            g.scale(v[0], calls)
        },
        &GradCheckConfig::default(),
    );
    assert!(matches!(result, Err(TensorError::NonDeterministic { .. })));
}

#[test]
fn grad_check_rejects_step_outside_range() {
    let params = vec![("x".to_string(), Tensor::vector(vec![1.0]).unwrap())];
    let cfg = GradCheckConfig { h: 1e-2, ..Default::default() };
    assert!(grad_check(&params, |g, v| g.sum(v[0]), &cfg).is_err());
}

fn small_graph(values: &Tensor, weights: &Tensor) -> (Graph, Var, Var, Var) {
    let mut g = Graph::new();
    let x = g.constant(values.clone());
    let w = g.param(weights.clone());
    let h = g.matmul(x, w).unwrap();
    let a = g.gelu(h).unwrap();
    let s = g.softmax_rows(a).unwrap();
    let l = g.cross_entropy(s, &[1, 0]).unwrap();
    (g, x, w, l)
}

#[test]
fn backward_is_deterministic_and_leaves_constants_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&mut rng, &[2, 3]);
    let w = random(&mut rng, &[3, 3]);
    let (mut g1, x1, w1, l1) = small_graph(&x, &w);
    let (mut g2, _, w2, l2) = small_graph(&x, &w);
    g1.backward(l1).unwrap();
    g2.backward(l2).unwrap();
    let a: Vec<u64> = g1.grad(w1).unwrap().iter().map(|v| v.to_bits()).collect();
    let b: Vec<u64> = g2.grad(w2).unwrap().iter().map(|v| v.to_bits()).collect();
    assert_eq!(a, b);
    let before: Vec<u64> = x.values().iter().map(|v| v.to_bits()).collect();
    let after: Vec<u64> = g1.value(x1).values().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
    assert!(g1.grad(x1).is_none());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
}
