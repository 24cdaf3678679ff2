use aitok_core::tensor::gradcheck::grad_check;
use aitok_core::tensor::{attention_probs, Graph, Tensor, Var};
use aitok_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut rng(seed))
}

/// Reduces an arbitrary output to a scalar with fixed random weights so every
/// output coordinate contributes a distinct, well-scaled gradient.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = randn(g.shape(y), seed ^ 0xabc);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn check(
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    label: &str,
) {
    let err = grad_check(f, inputs, EPS).unwrap();
    assert!(err < TOL, "{label}: max relative error {err:e}");
}

#[test]
fn conv2d_center_tap_identity() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::ones(vec![1, 1, 4, 4]));
    let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
    w.data_mut()[4] = 1.0;
    let w = g.constant(w);
    let b = g.constant(Tensor::zeros(vec![1]));
    let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
    assert_eq!(g.shape(y), [1, 1, 2, 2]);
    assert!(g.value(y).data().iter().all(|&v| v == 1.0));
}

#[test]
fn conv2d_halves_spatial_dims() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 64, 64]));
    let w = g.constant(Tensor::zeros(vec![3, 2, 3, 3]));
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), [1, 3, 32, 32]);
}

#[test]
fn conv2d_channel_mismatch_names_dims() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 2, 8, 8]));
    let w = g.constant(Tensor::zeros(vec![3, 4, 3, 3]));
    let err = g.conv2d(x, w, None, 1, 1).unwrap_err();
    match err {
        Error::Shape { detail, .. } => assert!(detail.contains("[1, 2, 8, 8]") && detail.contains("[3, 4, 3, 3]")),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn conv_transpose_doubles_and_zero_weight_gives_bias() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::uniform(vec![1, 1, 2, 2], -1.0, 1.0, &mut rng(1)));
    let w = g.constant(Tensor::zeros(vec![1, 1, 4, 4]));
    let b = g.constant(Tensor::full(vec![1], 0.75));
    let y = g.conv_transpose2d(x, w, Some(b), 2, 1).unwrap();
    assert_eq!(g.shape(y), [1, 1, 4, 4]);
    assert!(g.value(y).data().iter().all(|&v| v == 0.75));

    let x = g.constant(Tensor::zeros(vec![2, 3, 5, 7]));
    let w = g.constant(Tensor::zeros(vec![3, 4, 4, 4]));
    let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
    assert_eq!(g.shape(y), [2, 4, 10, 14]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> for the same weights.
    let x = randn(&[1, 2, 6, 6], 3);
    let w = randn(&[3, 2, 4, 4], 4);
    let mut g = Graph::<f64>::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let cx = g.conv2d(xv, wv, None, 2, 1).unwrap();
    let y = randn(g.shape(cx), 5);
    let yv = g.constant(y.clone());
    let ty = g.conv_transpose2d(yv, wv, None, 2, 1).unwrap();
    let lhs: f64 = g.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = g.value(ty).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn conv2d_gradients() {
    for (i, (shape, o, k, s, p)) in [
        ([1, 2, 5, 5], 3, 3, 1, 1),
        ([2, 1, 6, 6], 2, 3, 2, 1),
        ([1, 3, 7, 5], 2, 2, 2, 0),
    ]
    .into_iter()
    .enumerate()
    {
        let seed = i as u64 * 10;
        let inputs = [randn(&shape, seed), randn(&[o, shape[1], k, k], seed + 1), randn(&[o], seed + 2)];
        check(
            |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), s, p)?;
                weighted_sum(g, y, seed)
            },
            &inputs,
            "conv2d",
        );
    }
}

#[test]
fn conv_transpose2d_gradients() {
    for (i, (shape, o, k, s, p)) in [
        ([1, 2, 3, 3], 2, 4, 2, 1),
        ([2, 3, 2, 2], 1, 4, 2, 1),
        ([1, 1, 3, 2], 3, 3, 1, 0),
    ]
    .into_iter()
    .enumerate()
    {
        let seed = 100 + i as u64 * 10;
        let inputs = [randn(&shape, seed), randn(&[shape[1], o, k, k], seed + 1), randn(&[o], seed + 2)];
        check(
            |g, v| {
                let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), s, p)?;
                weighted_sum(g, y, seed)
            },
            &inputs,
            "conv_transpose2d",
        );
    }
}

#[test]
fn linear_gradients() {
    for (i, (rows, fin, fout)) in [(1, 3, 2), (4, 5, 3), (6, 2, 7)].into_iter().enumerate() {
        let seed = 200 + i as u64;
        let inputs = [randn(&[rows, fin], seed), randn(&[fin, fout], seed + 7), randn(&[fout], seed + 9)];
        check(
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                weighted_sum(g, y, seed)
            },
            &inputs,
            "linear",
        );
    }
}

#[test]
fn matmul_and_elementwise_gradients() {
    for (i, (m, k, n)) in [(2, 3, 4), (1, 5, 1), (3, 3, 3)].into_iter().enumerate() {
        let seed = 300 + i as u64;
        let inputs = [randn(&[m, k], seed), randn(&[k, n], seed + 1), randn(&[n], seed + 2)];
        check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                let y = g.add(y, v[2])?;
                let y = g.mul(y, v[2])?;
                let y = g.scale(y, 0.7);
                let r = g.reshape(y, vec![n, m])?;
                let pm = g.permute(r, &[1, 0])?;
                let d = g.sub(pm, y)?;
                let s = g.sigmoid(d);
                weighted_sum(g, s, seed)
            },
            &inputs,
            "matmul/add/mul/sub/permute/sigmoid",
        );
    }
}

#[test]
fn relu_gradients() {
    for (i, shape) in [[2, 3], [4, 4], [1, 9]].into_iter().enumerate() {
        let seed = 400 + i as u64;
        // keep inputs away from the kink
        let x = randn(&shape, seed).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
        check(
            |g, v| {
                let y = g.relu(v[0]);
                weighted_sum(g, y, seed)
            },
            &[x],
            "relu",
        );
    }
}

#[test]
fn softmax_rows_sum_to_one_and_uniform() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(vec![1, 4]));
    let y = g.softmax(x, 1).unwrap();
    assert_eq!(g.value(y).data(), &[0.25, 0.25, 0.25, 0.25]);

    let x = g.constant(Tensor::randn(vec![3, 5, 2], 4.0, &mut rng(8)));
    for axis in 0..3 {
        let y = g.softmax(x, axis).unwrap();
        let v = g.value(y);
        assert!(v.data().iter().all(|&p| p >= 0.0));
        let shape = v.shape();
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        for o in 0..outer {
            for i in 0..inner {
                let s: f32 = (0..shape[axis]).map(|j| v.data()[(o * shape[axis] + j) * inner + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }
    assert!(matches!(g.softmax(x, 3), Err(Error::Index { .. })));
}

#[test]
fn softmax_gradients() {
    for (i, (shape, axis)) in [(vec![2, 5], 1), (vec![3, 4, 2], 1), (vec![4, 3], 0)].into_iter().enumerate() {
        let seed = 500 + i as u64;
        check(
            |g, v| {
                let y = g.softmax(v[0], axis)?;
                weighted_sum(g, y, seed)
            },
            &[randn(&shape, seed)],
            "softmax",
        );
    }
}

#[test]
fn norm_gradients() {
    for (i, (shape, groups)) in [([2, 4, 3, 3], 2), ([1, 8, 2, 2], 8), ([3, 6, 1, 4], 3)].into_iter().enumerate() {
        let seed = 600 + i as u64;
        let c = shape[1];
        let inputs = [randn(&shape, seed), randn(&[c], seed + 1), randn(&[c], seed + 2)];
        check(
            |g, v| {
                let y = g.group_norm(v[0], v[1], v[2], groups, 1e-5)?;
                weighted_sum(g, y, seed)
            },
            &inputs,
            "group_norm",
        );
    }
    for (i, shape) in [vec![2, 5], vec![3, 2, 4], vec![1, 7]].into_iter().enumerate() {
        let seed = 650 + i as u64;
        let d = *shape.last().unwrap();
        let inputs = [randn(&shape, seed), randn(&[d], seed + 1), randn(&[d], seed + 2)];
        check(
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(g, y, seed)
            },
            &inputs,
            "layer_norm",
        );
    }
}

#[test]
fn gather_and_slice_gradients() {
    for (i, (rows, ids)) in [(5, vec![0, 3, 3, 1]), (3, vec![2]), (4, vec![1, 0, 2, 3, 1])].into_iter().enumerate() {
        let seed = 700 + i as u64;
        check(
            |g, v| {
                let e = g.embedding(v[0], &ids)?;
                let s = g.slice_last(e, 1..3)?;
                weighted_sum(g, s, seed)
            },
            &[randn(&[rows, 4], seed)],
            "gather/slice",
        );
    }
    let mut g = Graph::<f32>::new();
    let t = g.constant(Tensor::zeros(vec![3, 2]));
    assert!(matches!(g.embedding(t, &[3]), Err(Error::Index { index: 3, limit: 3, .. })));
}

#[test]
fn causal_attention_first_position_sees_only_itself() {
    let q = Tensor::<f64>::randn(vec![1, 2, 4, 3], 1.0, &mut rng(9));
    let k = Tensor::<f64>::randn(vec![1, 2, 4, 3], 1.0, &mut rng(10));
    let (p, _) = attention_probs(&q, &k, true).unwrap();
    for h in 0..2 {
        let block = &p[h * 16..(h + 1) * 16];
        assert_eq!(block[0], 1.0);
        for i in 0..4 {
            for j in 0..4 {
                if j > i {
                    assert_eq!(block[i * 4 + j], 0.0);
                }
            }
            let s: f64 = block[i * 4..(i + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
    let k_short = Tensor::<f64>::zeros(vec![1, 2, 3, 3]);
    assert!(attention_probs(&q, &k_short, true).is_err());
    assert!(attention_probs(&q, &k_short, false).is_ok());
}

#[test]
fn attention_gradients() {
    for (i, (lead, tq, tk, d, causal)) in [
        (vec![1, 2], 3, 3, 2, true),
        (vec![2, 1], 2, 4, 3, false),
        (vec![1, 3], 4, 4, 2, false),
    ]
    .into_iter()
    .enumerate()
    {
        let seed = 800 + i as u64;
        let mk = |t: usize, s: u64| {
            let mut shape = lead.clone();
            shape.extend([t, d]);
            randn(&shape, s)
        };
        let inputs = [mk(tq, seed), mk(tk, seed + 1), mk(tk, seed + 2)];
        check(
            |g, v| {
                let y = g.attention(v[0], v[1], v[2], causal)?;
                weighted_sum(g, y, seed)
            },
            &inputs,
            "attention",
        );
    }
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(Tensor::zeros(vec![3, 128]));
    let l = g.masked_cross_entropy(logits, &[1, 2, 3], &[false; 3]).unwrap();
    assert!((g.value(l).item() - 128f64.ln()).abs() < 1e-12);
    assert!((g.value(l).item() - 4.852).abs() < 1e-3);

    let l = g.masked_cross_entropy(logits, &[999, 5, 0], &[true; 3]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(logits).unwrap().iter().all(|&v| v == 0.0));

    assert!(matches!(
        g.masked_cross_entropy(logits, &[128, 0, 0], &[false, true, true]),
        Err(Error::Index { index: 128, .. })
    ));
}

#[test]
fn cross_entropy_ignored_rows_get_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let logits = g.leaf(randn(&[4, 6], 11));
    let l = g.masked_cross_entropy(logits, &[1, 0, 5, 2], &[false, true, false, true]).unwrap();
    let grads = g.backward(l).unwrap();
    let gl = grads.get(logits).unwrap();
    assert!(gl[6..12].iter().all(|&v| v == 0.0));
    assert!(gl[18..24].iter().all(|&v| v == 0.0));
    assert!(gl[0..6].iter().any(|&v| v != 0.0));

    for (i, n) in [3usize, 5, 8].into_iter().enumerate() {
        let seed = 900 + i as u64;
        let targets: Vec<usize> = (0..n).map(|j| (j * 7) % 5).collect();
        let ignore: Vec<bool> = (0..n).map(|j| j % 3 == 1).collect();
        check(
            |g, v| g.masked_cross_entropy(v[0], &targets, &ignore),
            &[randn(&[n, 5], seed)],
            "masked_cross_entropy",
        );
    }
}

#[test]
fn masked_mse_examples() {
    let target = vec![0.5f64, -1.0, 2.0, 0.0];
    let mut g = Graph::<f64>::new();
    let p = g.leaf(Tensor::new(vec![4], target.clone()).unwrap());
    let l = g.masked_mse(p, &target, &[true; 4]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let shifted: Vec<f64> = target.iter().map(|v| v + 1.0).collect();
    let p1 = g.leaf(Tensor::new(vec![4], shifted).unwrap());
    let l = g.masked_mse(p1, &target, &[true; 4]).unwrap();
    assert_eq!(g.value(l).item(), 1.0);

    let l = g.masked_mse(p1, &target, &[false; 4]).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    // garbage in invalid positions changes neither loss nor gradient
    let valid = [true, false, true, false];
    let a = Tensor::new(vec![4], vec![1.0, 7.0, 3.0, -9.0]).unwrap();
    let b = Tensor::new(vec![4], vec![1.0, 1e6, 3.0, f64::MAX / 4.0]).unwrap();
    let mut tb = target.clone();
    tb[1] = 123.0;
    let run = |x: Tensor<f64>, t: &[f64]| {
        let mut g = Graph::new();
        let v = g.leaf(x);
        let l = g.masked_mse(v, t, &valid).unwrap();
        let gr = g.backward(l).unwrap();
        (g.value(l).item(), gr.get(v).unwrap().to_vec())
    };
    assert_eq!(run(a, &target), run(b, &tb));
}

#[test]
fn grad_check_harness_examples() {
    let x = randn(&[3, 4], 12);
    let err = grad_check(|g, v| Ok(g.sum(v[0])), std::slice::from_ref(&x), EPS).unwrap();
    assert!(err < 1e-10, "{err}");

    let target = randn(&[12], 13).into_data();
    let valid: Vec<bool> = (0..12).map(|i| i % 4 != 0).collect();
    let err = grad_check(|g, v| g.masked_mse(v[0], &target, &valid), std::slice::from_ref(&x), EPS).unwrap();
    assert!(err < 1e-6, "{err}");

    let bce_t: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
    let err = grad_check(|g, v| g.masked_bce_with_logits(v[0], &bce_t, &valid), std::slice::from_ref(&x), EPS).unwrap();
    assert!(err < TOL, "{err}");

    let not_scalar = grad_check(|g, v| Ok(g.relu(v[0])), &[x], EPS);
    assert!(matches!(not_scalar, Err(Error::Contract(_))));
}

#[test]
fn straight_through_forward_and_gradient() {
    let mut g = Graph::<f64>::new();
    let z = g.leaf(randn(&[2, 3], 14));
    let zq_t = randn(&[2, 3], 15);
    let zq = g.leaf(zq_t.clone());
    let st = g.straight_through(z, zq).unwrap();
    assert_eq!(g.value(st), &zq_t);
    let s = g.sum(st);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(z).unwrap().iter().all(|&v| v == 1.0));
    assert!(grads.get(zq).is_none());
}

#[test]
fn forward_backward_is_deterministic() {
    let run = || {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::randn(vec![2, 3, 8, 8], 1.0, &mut rng(21)));
        let w = g.leaf(Tensor::randn(vec![4, 3, 3, 3], 0.3, &mut rng(22)));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let y = g.relu(y);
        let l = g.mean(y);
        let gr = g.backward(l).unwrap();
        (g.value(l).item().to_bits(), gr.get(w).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}
