use aitok_core::tensor::gradcheck::grad_check;
use aitok_core::vq::{commitment_loss, embed_soft, Codebook};
use aitok_core::{Graph, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_codebook(k: usize, d: usize, seed: u64) -> Codebook<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Codebook::from_embeddings(Tensor::randn(vec![k, d], 1.0, &mut rng), 0.99, 1e-5)
}

fn one_hot(k: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[i] = 1.0;
    v
}

proptest! {
    #[test]
    fn quantizing_a_code_returns_it(k in 2usize..40, d in 1usize..12, seed in any::<u64>()) {
        let cb = random_codebook(k, d, seed);
        let (idx, zq) = cb.quantize_hard(&cb.embeddings).unwrap();
        prop_assert_eq!(idx, (0..k).collect::<Vec<_>>());
        prop_assert_eq!(zq.data(), cb.embeddings.data());
    }

    #[test]
    fn one_hot_soft_equals_hard(k in 2usize..40, d in 1usize..12, seed in any::<u64>()) {
        let cb = random_codebook(k, d, seed);
        let rows: Vec<f64> = (0..k).flat_map(|i| one_hot(k, i)).collect();
        let soft = cb.embed_soft(&Tensor::new(vec![k, k], rows).unwrap()).unwrap();
        let hard = cb.embed_indices(&(0..k).collect::<Vec<_>>()).unwrap();
        prop_assert_eq!(soft.data(), hard.data());
    }

    #[test]
    fn soft_embedding_is_convex(
        k in 2usize..20,
        d in 1usize..8,
        seed in any::<u64>(),
        logits in prop::collection::vec(-8.0f64..8.0, 20),
    ) {
        let cb = random_codebook(k, d, seed);
        let w: Vec<f64> = logits[..k].iter().map(|v| v.exp()).collect();
        let s: f64 = w.iter().sum();
        let p: Vec<f64> = w.iter().map(|v| v / s).collect();
        let out = cb.embed_soft(&Tensor::new(vec![1, k], p).unwrap()).unwrap();
        for j in 0..d {
            let col = (0..k).map(|c| cb.row(c)[j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min);
            let hi = col.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.data()[j] >= lo - 1e-12 && out.data()[j] <= hi + 1e-12);
        }
    }

    #[test]
    fn ema_conserves_total_count(k in 2usize..16, d in 1usize..6, n in 0usize..50, seed in any::<u64>()) {
        let mut cb = random_codebook(k, d, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..3 {
            let z = Tensor::randn(vec![n, d], 1.0, &mut rng);
            let (idx, _) = cb.quantize_hard(&z).unwrap();
            let old: f64 = cb.ema_size.data().iter().sum();
            cb.ema_update(&z, &idx).unwrap();
            let new: f64 = cb.ema_size.data().iter().sum();
            prop_assert!((new - (0.99 * old + 0.01 * n as f64)).abs() < 1e-5);
            prop_assert!(cb.ema_size.data().iter().all(|&v| v >= 0.0));
        }
    }
}

#[test]
fn ema_row_is_smoothed_mean_after_update() {
    let mut cb = random_codebook(4, 3, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = Tensor::randn(vec![10, 3], 1.0, &mut rng);
    let (idx, _) = cb.quantize_hard(&z).unwrap();
    cb.ema_update(&z, &idx).unwrap();
    let total: f64 = cb.ema_size.data().iter().sum();
    for c in 0..4 {
        let smoothed = (cb.ema_size.data()[c] + 1e-5) / (total + 4.0 * 1e-5) * total;
        for j in 0..3 {
            let expect = cb.ema_sum.data()[c * 3 + j] / smoothed;
            assert!((cb.row(c)[j] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn ema_converges_geometrically_to_constant_input() {
    // With every z equal to v, the only code in use satisfies
    // sum_t = d^t (sum_0 - n_0 v) + n_t v, so its distance to v shrinks by
    // d·n_{t-1}/n_t per step.
    let v = [0.3f64, -0.7];
    let mut cb = Codebook::from_embeddings(Tensor::new(vec![2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap(), 0.99, 1e-5);
    let z = Tensor::new(vec![4, 2], v.repeat(4)).unwrap();
    let mut size = 1.0f64;
    let mut offset: [f64; 2] = [-v[0], -v[1]];
    for _ in 0..2000 {
        let (idx, _) = cb.quantize_hard(&z).unwrap();
        assert!(idx.iter().all(|&i| i == 0));
        cb.ema_update(&z, &idx).unwrap();
        size = 0.99 * size + 0.01 * 4.0;
        offset = [offset[0] * 0.99, offset[1] * 0.99];
        let sum = [cb.ema_sum.data()[0], cb.ema_sum.data()[1]];
        for j in 0..2 {
            assert!((sum[j] - (offset[j] + size * v[j])).abs() < 1e-9);
        }
    }
    for j in 0..2 {
        assert!((cb.row(0)[j] - v[j]).abs() < 1e-4, "{:?}", cb.row(0));
    }
}

#[test]
fn zero_decay_gives_batch_means() {
    let mut cb = Codebook::<f64>::from_embeddings(Tensor::new(vec![2, 1], vec![0.0, 10.0]).unwrap(), 0.0, 1e-5);
    let z = Tensor::new(vec![4, 1], vec![1.0, 2.0, 9.0, 12.0]).unwrap();
    let (idx, _) = cb.quantize_hard(&z).unwrap();
    assert_eq!(idx, [0, 0, 1, 1]);
    cb.ema_update(&z, &idx).unwrap();
    assert!((cb.row(0)[0] - 1.5).abs() < 1e-4);
    assert!((cb.row(1)[0] - 10.5).abs() < 1e-4);
}

#[test]
fn bottleneck_gradient_matches_hand_oracle() {
    // loss = sum(w ⊙ ste(z, z_q)) + beta·mean((z − z_q)²) over a 2-element z
    let z = Tensor::new(vec![1, 2], vec![0.2, 0.9]).unwrap();
    let cb = Codebook::from_embeddings(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(), 0.99, 1e-5);
    let (_, zq) = cb.quantize_hard(&z).unwrap();
    assert_eq!(zq.data(), &[1.0, 1.0]);
    let w = [0.5, -2.0];
    let beta = 0.25;

    let mut g = Graph::<f64>::new();
    let zv = g.leaf(z.clone());
    let zqv = g.constant(zq.clone());
    let st = g.straight_through(zv, zqv).unwrap();
    let wv = g.constant(Tensor::new(vec![2], w.to_vec()).unwrap());
    let rec = g.mul(st, wv).unwrap();
    let rec = g.sum(rec);
    let com = commitment_loss(&mut g, zv, zqv, beta).unwrap();
    let loss = g.add(rec, com).unwrap();
    let grads = g.backward(loss).unwrap();
    let gz = grads.get(zv).unwrap();
    for i in 0..2 {
        let expect = w[i] + 2.0 * beta * (z.data()[i] - zq.data()[i]) / 2.0;
        assert!((gz[i] - expect).abs() < 1e-14, "{i}: {} vs {expect}", gz[i]);
    }
}

#[test]
fn soft_embedding_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let table = Tensor::<f64>::randn(vec![5, 3], 1.0, &mut rng);
    let logits = Tensor::<f64>::randn(vec![4, 5], 1.0, &mut rng);
    let w = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
    let err = grad_check(
        |g, v| {
            let p = g.softmax(v[0], 1)?;
            let e = embed_soft(g, p, v[1])?;
            let wv = g.constant(w.clone());
            let y = g.mul(e, wv)?;
            Ok(g.sum(y))
        },
        &[logits, table],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn empty_or_degenerate_codebooks_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(Codebook::<f32>::new(1, 4, 0.99, 1e-5, &mut rng).is_err());
    assert!(Codebook::<f32>::new(4, 0, 0.99, 1e-5, &mut rng).is_err());
    let cb = Codebook::<f32>::new(4, 3, 0.99, 1e-5, &mut rng).unwrap();
    assert!(cb.quantize_hard(&Tensor::zeros(vec![2, 2])).is_err());
}
