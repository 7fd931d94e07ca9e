use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    // keep away from zero so relu and max-pool never sit on a kink
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    t(shape, &data)
}

#[test]
fn matmul_examples() {
    let g = Graph::new();
    let a = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let i = g.constant(Tensor::eye(2));
    assert_eq!(g.value(g.matmul(a, i).unwrap()).data(), &[1.0, 2.0, 3.0, 4.0]);
    let b = g.constant(t(&[2, 1], &[5.0, 6.0]));
    let ab = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(ab), vec![2, 1]);
    assert_eq!(g.value(ab).data(), &[17.0, 39.0]);
    let z = g.constant(Tensor::zeros(&[2, 2]));
    assert!(g.value(g.matmul(z, a).unwrap()).data().iter().all(|&v| v == 0.0));
    let bad = g.constant(Tensor::zeros(&[3, 1]));
    assert!(matches!(g.matmul(a, bad), Err(Error::Shape { op: "matmul", .. })));
}

#[test]
fn pointwise_examples() {
    let g = Graph::new();
    let x = g.constant(Tensor::vector(&[-1.0, 0.0, 2.0]).unwrap());
    assert_eq!(g.value(g.relu(x).unwrap()).data(), &[0.0, 0.0, 2.0]);
    let z = g.constant(Tensor::vector(&[0.0, 0.0]).unwrap());
    assert_eq!(g.value(g.softmax(z).unwrap()).data(), &[0.5, 0.5]);
    let zero = g.constant(Tensor::scalar(0.0));
    assert_eq!(g.value(g.sigmoid(zero).unwrap()).item(), 0.5);
    assert_eq!(g.value(g.tanh(zero).unwrap()).item(), 0.0);
}

#[test]
fn broadcasting_add_and_mul() {
    let g = Graph::new();
    let m = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let row = g.constant(t(&[1, 3], &[10.0, 20.0, 30.0]));
    let col = g.constant(t(&[2, 1], &[2.0, 3.0]));
    let s = g.constant(Tensor::scalar(0.5));
    assert_eq!(
        g.value(g.add(m, row).unwrap()).data(),
        &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]
    );
    assert_eq!(
        g.value(g.mul(m, col).unwrap()).data(),
        &[2.0, 4.0, 6.0, 12.0, 15.0, 18.0]
    );
    assert_eq!(g.value(g.mul(s, m).unwrap()).data(), &[0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    let bad = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(m, bad).is_err());
}

#[test]
fn conv_and_pool_hand_case() {
    let g = Graph::new();
    let x = g.constant(t(&[1, 1, 1, 4], &[1.0, 3.0, 2.0, 5.0]));
    let k = g.constant(t(&[1, 1, 1, 2], &[1.0, 1.0]));
    assert_eq!(g.value(g.conv2d(x, k, 0).unwrap()).data(), &[4.0, 5.0, 7.0]);
    let p = g.max_pool2d(x, [1, 2], [1, 2]).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 5.0]);
    let a = g.avg_pool2d(x, [1, 2], [1, 2]).unwrap();
    assert_eq!(g.value(a).data(), &[2.0, 3.5]);

    let one = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    assert_eq!(g.value(g.conv2d(x, one, 0).unwrap()).data(), g.value(x).data());
    let big = g.constant(Tensor::ones(&[1, 1, 2, 2]));
    assert!(matches!(g.conv2d(x, big, 0), Err(Error::Shape { op: "conv2d", .. })));
}

#[test]
fn layer_norm_two_point() {
    let g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = g.value(g.layer_norm(x).unwrap());
    assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
}

#[test]
fn backward_simple_cases() {
    let g = Graph::new();
    let x = g.param(Tensor::ones(&[2, 3]));
    let s = g.sum(x).unwrap();
    assert_eq!(g.backward(s).unwrap().get(x), Tensor::ones(&[2, 3]));

    let g = Graph::new();
    let x = g.param(Tensor::vector(&[1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let root = g.sum(sq).unwrap();
    assert_eq!(g.backward(root).unwrap().get(x).data(), &[2.0, 4.0]);
}

#[test]
fn unused_leaf_gets_exact_zero() {
    let g = Graph::new();
    let x = g.param(Tensor::vector(&[1.0, 2.0]).unwrap());
    let unused = g.param(Tensor::vector(&[3.0, 4.0, 5.0]).unwrap());
    let _ = g.tanh(unused).unwrap();
    let root = g.sum(x).unwrap();
    let grads = g.backward(root).unwrap();
    assert_eq!(grads.get(unused), Tensor::zeros(&[3]));
}

#[test]
fn shared_leaf_accumulates_both_paths() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xv = random(&[3, 4], &mut rng);
    let wv = random(&[4, 2], &mut rng);
    // shared: f(x) = sum(tanh(x W)) + sum(x * x)
    let g = Graph::new();
    let x = g.param(xv.clone());
    let w = g.constant(wv.clone());
    let a = g.sum(g.tanh(g.matmul(x, w).unwrap()).unwrap()).unwrap();
    let b = g.sum(g.mul(x, x).unwrap()).unwrap();
    let root = g.add(a, b).unwrap();
    let shared = g.backward(root).unwrap().get(x);

    // duplicated oracle: the same function with independent copies per use
    let g = Graph::new();
    let x1 = g.param(xv.clone());
    let x2 = g.param(xv.clone());
    let x3 = g.param(xv);
    let w = g.constant(wv);
    let a = g.sum(g.tanh(g.matmul(x1, w).unwrap()).unwrap()).unwrap();
    let b = g.sum(g.mul(x2, x3).unwrap()).unwrap();
    let root = g.add(a, b).unwrap();
    let grads = g.backward(root).unwrap();
    let mut expect = grads.get(x1);
    expect.add_assign(&grads.get(x2));
    expect.add_assign(&grads.get(x3));
    assert!(shared.max_abs_diff(&expect) < 1e-14);
}

#[test]
fn non_scalar_root_rejected() {
    let g = Graph::new();
    let x = g.param(Tensor::ones(&[2]));
    assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
}

#[test]
fn overflow_names_the_op() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(10.0));
    match g.scale(x, 1e308) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "scale"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

#[test]
fn grad_check_linear_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random(&[3, 2], &mut rng);
    let x = random(&[4, 3], &mut rng);
    let err = grad_check(
        |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.sum(y)
        },
        &[x, w],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn grad_check_three_layer_composite() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let point = vec![
            random(&[5, 4], &mut rng),
            random(&[4, 6], &mut rng),
            random(&[1, 6], &mut rng),
            random(&[6, 3], &mut rng),
            random(&[3, 1], &mut rng),
            random(&[5, 1], &mut rng),
        ];
        let err = grad_check(
            |g, v| {
                let h = g.tanh(g.add(g.matmul(v[0], v[1])?, v[2])?)?;
                let h = g.sigmoid(g.matmul(h, v[3])?)?;
                let y = g.matmul(h, v[4])?;
                g.mse(y, v[5])
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

type Build = fn(&Graph, &[Var]) -> crate::Result<Var>;

/// One entry per primitive: input shapes and a scalar-valued wrapper.
/// Results are weighted by a fixed random tensor so the gradient is not
/// uniform.
fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    fn weigh(g: &Graph, y: Var) -> crate::Result<Var> {
        let shape = g.shape(y);
        let n: usize = shape.iter().product();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        let w = g.constant(Tensor::new(shape, w)?);
        g.sum(g.mul(y, w)?)
    }
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| weigh(g, g.matmul(v[0], v[1])?)),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 2]], |g, v| weigh(g, g.bmm(v[0], v[1])?)),
        ("add", vec![vec![3, 4], vec![1, 4]], |g, v| weigh(g, g.add(v[0], v[1])?)),
        ("sub", vec![vec![3, 1], vec![3, 4]], |g, v| weigh(g, g.sub(v[0], v[1])?)),
        ("mul", vec![vec![2, 3, 4], vec![3, 1]], |g, v| weigh(g, g.mul(v[0], v[1])?)),
        ("mul_same", vec![vec![3, 4], vec![3, 4]], |g, v| weigh(g, g.mul(v[0], v[1])?)),
        ("affine", vec![vec![3, 2]], |g, v| weigh(g, g.affine(v[0], -1.5, 0.3)?)),
        ("relu", vec![vec![4, 3]], |g, v| weigh(g, g.relu(v[0])?)),
        ("tanh", vec![vec![4, 3]], |g, v| weigh(g, g.tanh(v[0])?)),
        ("sigmoid", vec![vec![4, 3]], |g, v| weigh(g, g.sigmoid(v[0])?)),
        ("softmax", vec![vec![2, 3, 4]], |g, v| weigh(g, g.softmax(v[0])?)),
        ("concat_cols", vec![vec![3, 2], vec![3, 3]], |g, v| {
            weigh(g, g.concat_cols(&[v[0], v[1], v[0]])?)
        }),
        ("slice_cols", vec![vec![3, 5]], |g, v| weigh(g, g.slice_cols(v[0], 1, 4)?)),
        ("slice_rows", vec![vec![5, 3]], |g, v| weigh(g, g.slice_rows(v[0], 1, 3)?)),
        ("reshape", vec![vec![3, 4]], |g, v| weigh(g, g.reshape(v[0], &[2, 6])?)),
        ("transpose", vec![vec![3, 4]], |g, v| weigh(g, g.transpose(v[0])?)),
        ("transpose_last2", vec![vec![2, 3, 4]], |g, v| weigh(g, g.transpose_last2(v[0])?)),
        ("mean", vec![vec![3, 4]], |g, v| {
            let m = g.mean(v[0])?;
            g.mul(m, m)
        }),
        ("layer_norm", vec![vec![3, 5]], |g, v| weigh(g, g.layer_norm(v[0])?)),
        ("batch_norm", vec![vec![5, 3]], |g, v| weigh(g, g.batch_norm(v[0])?)),
        ("conv2d", vec![vec![2, 2, 5, 4], vec![3, 2, 3, 3]], |g, v| {
            weigh(g, g.conv2d(v[0], v[1], 1)?)
        }),
        ("conv2d_valid", vec![vec![1, 1, 4, 4], vec![2, 1, 2, 3]], |g, v| {
            weigh(g, g.conv2d(v[0], v[1], 0)?)
        }),
        ("max_pool2d", vec![vec![2, 2, 4, 5]], |g, v| weigh(g, g.max_pool2d(v[0], [2, 2], [2, 2])?)),
        ("avg_pool2d", vec![vec![2, 2, 4, 5]], |g, v| weigh(g, g.avg_pool2d(v[0], [2, 3], [1, 2])?)),
        ("mse", vec![vec![4, 1], vec![4, 1]], |g, v| g.mse(v[0], v[1])),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    for (name, shapes, build) in primitive_cases() {
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let err = grad_check(build, &point, 1e-5).unwrap();
            assert!(err < 1e-4, "{name} seed {seed}: {err}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5,
        vals in prop::collection::vec(-30.0f64..30.0, 1..40),
    ) {
        let cols = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r + 1) as f64)).collect();
        let g = Graph::new();
        let x = g.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = g.value(g.softmax(x).unwrap());
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn gradient_shape_equals_value_shape(seed in 0u64..1000) {
        for (_, shapes, build) in primitive_cases() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let point: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
            let g = Graph::new();
            let vars: Vec<Var> = point.iter().map(|p| g.param(p.clone())).collect();
            let root = build(&g, &vars).unwrap();
            let grads = g.backward(root).unwrap();
            for (v, p) in vars.iter().zip(&point) {
                let gv = grads.get(*v);
                prop_assert_eq!(gv.shape(), p.shape());
            }
        }
    }
}
