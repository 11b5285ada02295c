use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::LAYER_NORM_EPS;
use super::*;
use crate::error::Error;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
}

#[test]
fn tanh_fixes_zero() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0]));
    let y = tape.tanh(x);
    assert_eq!(tape.value(y).values(), &[0.0]);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0; 4]));
    let y = tape.softmax_lastdim(x);
    assert_eq!(tape.value(y).values(), &[0.25; 4]);
}

#[test]
fn identity_matmul_returns_operand() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, &[3, 3]);
    let mut tape = Tape::new();
    let i = tape.constant(Tensor::identity(3));
    let av = tape.constant(a.clone());
    let y = tape.matmul(i, av).unwrap();
    assert_eq!(tape.value(y), &a);
}

#[test]
fn large_matmul_matches_naive_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, k, n) = (37, 29, 41);
    let a = random(&mut rng, &[m, k]);
    let b = random(&mut rng, &[k, n]);
    let mut tape = Tape::new();
    let (av, bv) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let c = tape.matmul(av, bv).unwrap();
    for i in 0..m {
        for j in 0..n {
            let expect: f64 = (0..k).map(|p| a.at(i, p) * b.at(p, j)).sum();
            assert!((tape.value(c).at(i, j) - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_mismatch_names_op() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err();
    match err {
        Error::Dimension { op, shapes } => {
            assert_eq!(op, "matmul");
            assert!(shapes.contains("[2, 3]"));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn add_rejects_incompatible_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(matches!(tape.add(a, b), Err(Error::Dimension { op: "add", .. })));
}

#[test]
fn square_sum_gradient_is_two_x() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().values(), &[2.0, 4.0, 6.0]);
}

#[test]
fn sigmoid_gradient_at_zero_is_quarter() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0));
    let y = tape.sigmoid(x);
    let grads = tape.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().values(), &[0.25]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let y = tape.tanh(x);
    assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let leaves = vec![random(&mut rng, &[3, 2])];
    let report = grad_check(
        &leaves,
        |tape, v| {
            let z = tape.scale(v[0], 0.0);
            Ok(tape.sum_all(z))
        },
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed);
    let mut tape = Tape::new();
    let x = tape.leaf(leaves[0].clone());
    let unrelated = tape.constant(Tensor::scalar(2.0));
    let loss = tape.sum_all(unrelated);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().values().iter().all(|g| *g == 0.0));
}

/// Each primitive on its own, against central differences.
#[test]
fn every_primitive_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> crate::Result<Var>>;
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![vec![3, 4]], Box::new(|t, v| t.transpose(v[0]))),
        ("add_bcast", vec![vec![3, 4], vec![1, 4]], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub_bcast", vec![vec![3, 4], vec![3, 1]], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul_bcast", vec![vec![3, 4], vec![3, 1]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("mul_scalar", vec![vec![3, 4], vec![]], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![vec![3, 4], vec![1, 4]], Box::new(|t, v| {
            let d = t.sigmoid(v[1]);
            let d = t.offset(d, 0.5);
            t.div(v[0], d)
        })),
        ("sigmoid", vec![vec![2, 5]], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("tanh", vec![vec![2, 5]], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("elu", vec![vec![2, 5]], Box::new(|t, v| Ok(t.elu(v[0])))),
        ("sqrt", vec![vec![2, 5]], Box::new(|t, v| {
            let s = t.mul(v[0], v[0])?;
            let s = t.offset(s, 0.3);
            Ok(t.sqrt(s))
        })),
        ("softmax", vec![vec![3, 5]], Box::new(|t, v| Ok(t.softmax_lastdim(v[0])))),
        ("layer_norm", vec![vec![3, 5]], Box::new(|t, v| Ok(t.layer_norm_lastdim(v[0])))),
        ("concat_lastdim", vec![vec![3, 2], vec![3, 3]], Box::new(|t, v| t.concat_lastdim(&[v[0], v[1], v[0]]))),
        ("concat_rows", vec![vec![2, 3], vec![1, 3]], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("slice_cols", vec![vec![3, 5]], Box::new(|t, v| t.slice_cols(v[0], 1, 3))),
        ("slice_rows", vec![vec![4, 3]], Box::new(|t, v| t.slice_rows(v[0], 1, 2))),
        ("embedding", vec![vec![4, 3]], Box::new(|t, v| t.embedding_lookup(v[0], 2))),
        ("dropout", vec![vec![4, 3]], Box::new(|t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            t.dropout(v[0], 0.3, &mut rng)
        })),
    ];
    for (name, shapes, build) in cases {
        let leaves: Vec<Tensor> = shapes.iter().map(|s| random(&mut rng, s)).collect();
        // A weighted sum makes every output coordinate matter differently.
        let weights = random(&mut rng, &[64]);
        let report = grad_check(
            &leaves,
            |tape, vars| {
                let out = build(tape, vars)?;
                let n = tape.value(out).numel();
                let shape = tape.value(out).shape().to_vec();
                let w = tape.constant(Tensor::new(shape, weights.values()[..n].to_vec())?);
                let prod = tape.mul(out, w)?;
                Ok(tape.sum_all(prod))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "{name}: {report}");
    }
}

/// Random five-leaf graph mixing most primitives.
#[test]
fn random_mixed_graph_matches_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let leaves = vec![
            random(&mut rng, &[4, 3]),
            random(&mut rng, &[3, 3]),
            random(&mut rng, &[1, 3]),
            random(&mut rng, &[4, 1]),
            random(&mut rng, &[5, 3]),
        ];
        let report = grad_check(
            &leaves,
            |t, v| {
                let h = t.matmul(v[0], v[1])?;
                let h = t.add(h, v[2])?;
                let h = t.elu(h);
                let g = t.sigmoid(v[3]);
                let h = t.mul(h, g)?;
                let n = t.layer_norm_lastdim(h);
                let e = t.embedding_lookup(v[4], 3)?;
                let n = t.add(n, e)?;
                let s = t.softmax_lastdim(n);
                let th = t.tanh(h);
                let c = t.concat_lastdim(&[s, th])?;
                let c = t.slice_cols(c, 1, 4)?;
                let c = t.mul(c, c)?;
                let m = t.mean_all(c);
                let sq = t.sqrt(m);
                Ok(t.scale(sq, 3.0))
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "seed {seed}: {report}");
    }
}

#[test]
fn backward_with_seed_is_a_vector_jacobian_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&mut rng, &[3, 2]);
    let seed = random(&mut rng, &[3, 2]);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = tape.tanh(xv);
    let g = tape.backward_with_seed(y, &seed).unwrap();
    for k in 0..6 {
        let expect = seed.values()[k] * (1.0 - x.values()[k].tanh().powi(2));
        assert!((g.get(xv).unwrap().values()[k] - expect).abs() < 1e-15);
    }
}

#[test]
fn forward_is_bitwise_reproducible() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&mut rng, &[64, 48]);
        let b = random(&mut rng, &[48, 40]);
        let mut tape = Tape::new();
        let (av, bv) = (tape.constant(a), tape.constant(b));
        let c = tape.matmul(av, bv).unwrap();
        let c = tape.softmax_lastdim(c);
        tape.value(c).clone()
    };
    assert_eq!(run().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
               run().values().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

#[test]
fn layer_norm_variance_follows_epsilon_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random(&mut rng, &[6, 7]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = tape.layer_norm_lastdim(xv);
    for i in 0..6 {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / 7.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 7.0;
        let out = tape.value(y).row(i);
        let out_var = out.iter().map(|v| v * v).sum::<f64>() / 7.0;
        assert!((out_var - var / (var + LAYER_NORM_EPS)).abs() < 1e-12);
    }
}

#[test]
fn dropout_rate_zero_is_identity_and_rate_one_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(tape.dropout(x, 0.0, &mut rng).unwrap(), x);
    assert!(tape.dropout(x, 1.0, &mut rng).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_a_simplex(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(3, 4, values).unwrap());
        let y = tape.softmax_lastdim(x);
        for i in 0..3 {
            let row = tape.value(y).row(i);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    /// With row variance far above the epsilon the normalized rows have mean
    /// 0 and variance 1 to the stated tolerances.
    #[test]
    fn layer_norm_rows_are_standardized(
        values in prop::collection::vec(-1.0f64..1.0, 16),
        scale in 100.0f64..1000.0,
    ) {
        let spread: Vec<f64> = values.iter().enumerate()
            .map(|(i, v)| scale * (v + if i % 2 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 8, spread).unwrap());
        let y = tape.layer_norm_lastdim(x);
        for i in 0..2 {
            let row = tape.value(y).row(i);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn tensor_new_enforces_element_count(rows in 1usize..5, cols in 1usize..5, extra in 1usize..3) {
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols]).is_ok());
        prop_assert!(Tensor::new(vec![rows, cols], vec![0.0; rows * cols + extra]).is_err());
    }
}
