//! Self-checking suites behind `roundtrip` and `gradcheck`.

use aitok_core::seq::{
    decode_depth, decode_instances, encode_depth, encode_instances, encode_records, Section, Task, TokenSequence,
    Vocabulary, RECORD_LEN,
};
use aitok_core::scene::{InstanceAnnotation, MASK_SIDE};
use aitok_core::solver::{aux_loss, SolverConfig, SolverModel};
use aitok_core::tensor::gradcheck::grad_check;
use aitok_core::tensor::{ParamVars, Var};
use aitok_core::tokenizer::{InterpolationTokenizer, OutputKind, TokenGrid, TokenizerConfig, TokenizerModel};
use aitok_core::vq::{embed_soft, Codebook};
use aitok_core::{Graph, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const GRAD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: usize,
    pub failures: usize,
    pub first_failure: Option<String>,
    pub stats: serde_json::Value,
}

impl SuiteReport {
    fn new(suite: &str) -> Self {
        SuiteReport { suite: suite.into(), cases: 0, failures: 0, first_failure: None, stats: serde_json::json!({}) }
    }

    fn check(&mut self, ok: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        if !ok {
            self.failures += 1;
            if self.first_failure.is_none() {
                self.first_failure = Some(what());
            }
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// One-hot soft/hard equality, quantization idempotence, convex-hull
/// bounds of soft embeddings and EMA count conservation.
pub fn vq_suite(n: usize, seed: u64) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("vq");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_count_err = 0.0f64;
    for case in 0..n {
        let (k, d, rows) = (rng.random_range(2..17), rng.random_range(1..9), rng.random_range(1..33));
        let mut cb = Codebook::<f64>::new(k, d, 0.99, 1e-5, &mut rng)?;
        let z = Tensor::<f64>::randn(vec![rows, d], 1.0, &mut rng);
        let (idx, zq) = cb.quantize_hard(&z)?;

        let mut onehot = vec![0.0; rows * k];
        idx.iter().enumerate().for_each(|(i, &c)| onehot[i * k + c] = 1.0);
        let soft = cb.embed_soft(&Tensor::new(vec![rows, k], onehot)?)?;
        r.check(soft.data() == zq.data(), || format!("case {case}: one-hot soft embedding differs from hard"));

        let (again, _) = cb.quantize_hard(&zq)?;
        r.check(again == idx, || format!("case {case}: quantizing a quantized batch changed indices"));

        let logits = Tensor::<f64>::randn(vec![rows, k], 2.0, &mut rng);
        let mut probs = Vec::with_capacity(rows * k);
        for row in logits.data().chunks(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            probs.extend(e.iter().map(|v| v / s));
        }
        let mixed = cb.embed_soft(&Tensor::new(vec![rows, k], probs)?)?;
        let inside = (0..d).all(|j| {
            let col: Vec<f64> = (0..k).map(|c| cb.row(c)[j]).collect();
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            mixed.data().chunks(d).all(|row| row[j] >= lo - 1e-12 && row[j] <= hi + 1e-12)
        });
        r.check(inside, || format!("case {case}: soft embedding left the codebook's bounding box"));

        let before: f64 = cb.ema_size.data().iter().sum();
        cb.ema_update(&z, &idx)?;
        let after: f64 = cb.ema_size.data().iter().sum();
        let expected = cb.decay * before + (1.0 - cb.decay) * rows as f64;
        let err = (after - expected).abs();
        worst_count_err = worst_count_err.max(err);
        r.check(err <= 1e-5, || format!("case {case}: EMA counts {after} vs {expected}"));
    }
    r.stats = serde_json::json!({ "max_ema_count_error": worst_count_err });
    Ok(r)
}

fn block_mask(rng: &mut impl Rng) -> Vec<bool> {
    // constant on 16×16 blocks, so the nearest-neighbour codec is lossless
    let cells: Vec<bool> = (0..16).map(|_| rng.random_bool(0.5)).collect();
    (0..MASK_SIDE * MASK_SIDE).map(|p| cells[(p / MASK_SIDE / 16) * 4 + (p % MASK_SIDE) / 16]).collect()
}

fn random_box(rng: &mut impl Rng) -> [f32; 4] {
    let (a, b) = (rng.random::<f32>(), rng.random::<f32>());
    let (c, d) = (rng.random::<f32>(), rng.random::<f32>());
    [a.min(b), c.min(d), a.max(b), c.max(d)]
}

/// Token-level roundtrips: random instance lists through the instance
/// codec and random grids through the depth codec.
pub fn codec_suite(n: usize, seed: u64) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("codec");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codec = InterpolationTokenizer::for_masks(16);
    let vocab = Vocabulary::new(2000, 3, 2, 128)?;
    let mut worst_box = 0.0f64;
    for case in 0..n {
        let count = rng.random_range(0..6);
        let inst: Vec<InstanceAnnotation> = (0..count)
            .map(|_| InstanceAnnotation::new(random_box(&mut rng), rng.random_range(0..3), block_mask(&mut rng)))
            .collect::<Result<_>>()?;
        let n_noise = rng.random_range(0..3);
        let seq = encode_instances(&inst, &vocab, &codec, n_noise, &mut rng)?;
        let back = decode_instances(&seq, &vocab, &codec, 0.0)?;
        // real records lead the sequence, so re-encoding the decoded ones
        // in order must reproduce that prefix token for token
        let reals: Vec<InstanceAnnotation> = back.iter().map(|d| d.instance.clone()).collect();
        let renc = encode_records(&reals, &vocab, &codec)?;
        let prefix = reals.len() * RECORD_LEN;
        let same = reals.len() == inst.len() && renc.ids[..prefix] == seq.ids[..prefix];
        r.check(same, || format!("case {case}: instance roundtrip changed tokens"));
        for d in &back {
            let b = d.instance.bbox;
            let err = |o: &InstanceAnnotation| (0..4).map(|j| (o.bbox[j] as f64 - b[j] as f64).abs()).fold(0.0, f64::max);
            let best = inst
                .iter()
                .filter(|o| o.class_id == d.instance.class_id && o.mask64 == d.instance.mask64)
                .map(err)
                .fold(f64::INFINITY, f64::min);
            worst_box = worst_box.max(best);
        }

        let (gh, gw) = (rng.random_range(1..16), rng.random_range(1..16));
        let grid = TokenGrid { h: gh, w: gw, ids: (0..gh * gw).map(|_| rng.random_range(0..128)).collect() };
        let s = encode_depth(&grid, &vocab)?;
        r.check(decode_depth(&s, &vocab, gh, gw)? == grid, || format!("case {case}: depth grid roundtrip differs"));
        let again = encode_depth(&decode_depth(&s, &vocab, gh, gw)?, &vocab)?;
        r.check(again.ids == s.ids, || format!("case {case}: depth sequence roundtrip differs"));
    }
    let bound = 1.0 / (2.0 * 2000.0);
    // box coordinates are f32; allow their rounding on top of the half bin
    r.check(worst_box <= bound + 1e-6, || format!("box error {worst_box} exceeds {bound}"));
    r.stats = serde_json::json!({ "max_box_error": worst_box, "box_error_bound": bound });
    Ok(r)
}

/// The interpolation baseline: lossless on block-aligned masks, token
/// idempotent, and within half a bin on constant depth.
pub fn interp_suite(n: usize, seed: u64) -> Result<SuiteReport> {
    let mut r = SuiteReport::new("interp");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = InterpolationTokenizer::for_masks(16);
    let depth = InterpolationTokenizer::for_depth(8, 256)?;
    let half_bin = 10.0 / 256.0 / 2.0;
    let mut worst = 0.0f64;
    for case in 0..n {
        let m = block_mask(&mut rng);
        let x: Vec<f32> = m.iter().map(|&b| b as u8 as f32).collect();
        let g = masks.encode(&x, MASK_SIDE, MASK_SIDE)?;
        let y = masks.decode(&g)?;
        r.check(y.iter().zip(&m).all(|(&v, &b)| (v >= 0.5) == b), || format!("case {case}: block mask changed"));
        r.check(masks.encode(&y, MASK_SIDE, MASK_SIDE)? == g, || format!("case {case}: mask tokens not idempotent"));

        let v = rng.random_range(0.0..10.0f32);
        let dg = depth.encode(&vec![v; 32 * 32], 32, 32)?;
        let back = depth.decode(&dg)?;
        let err = back.iter().map(|&b| (b as f64 - v as f64).abs()).fold(0.0, f64::max);
        worst = worst.max(err);
        r.check(err <= half_bin + 1e-5, || format!("case {case}: constant depth {v} off by {err}"));
    }
    r.stats = serde_json::json!({ "max_constant_depth_error": worst, "half_bin": half_bin });
    Ok(r)
}

fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let w = g.constant(Tensor::randn(g.shape(y).to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

type Check = (&'static str, Box<dyn Fn() -> Result<f64>>);

fn primitive<const N: usize>(
    name: &'static str,
    shapes: [&'static [usize]; N],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Check {
    (
        name,
        Box::new(move || {
            let inputs: Vec<Tensor<f64>> = shapes.iter().enumerate().map(|(i, s)| randn(s, 100 + i as u64)).collect();
            grad_check(
                |g, v| {
                    let y = f(g, v)?;
                    weighted_sum(g, y, 7)
                },
                &inputs,
                GRAD_EPS,
            )
        }),
    )
}

fn tiny_tokenizer(task: OutputKind) -> TokenizerConfig {
    let mut c = TokenizerConfig::depth().with_ratio(4);
    c.task = task;
    c.channels = vec![8, 8];
    c.n_resblocks = 1;
    c.codebook_size = 8;
    c.code_dim = 4;
    c
}

fn tokenizer_check(task: OutputKind) -> Result<f64> {
    let model = TokenizerModel::<f64>::build(tiny_tokenizer(task), 7)?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let input = Tensor::<f64>::uniform(vec![1, 1, 16, 16], 0.0, 1.0, &mut rng);
    let raw: Vec<f64> = Tensor::<f64>::uniform(vec![256], 0.0, 1.0, &mut rng).into_data();
    let target: Vec<f64> = match task {
        OutputKind::Depth => raw,
        OutputKind::Mask => raw.iter().map(|&v| (v > 0.5) as u8 as f64).collect(),
    };
    let valid: Vec<bool> = (0..256).map(|i| i % 5 != 0).collect();
    let values: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    grad_check(
        |g, vars| {
            let pv = ParamVars::from_vars(vars.to_vec());
            Ok(model.forward_train(g, &pv, &input, &target, &valid, true)?.loss)
        },
        &values,
        GRAD_EPS,
    )
}

fn solver_check(parallel: bool) -> Result<f64> {
    let cfg = SolverConfig {
        image_size: 16,
        patch: 8,
        embed_dim: 8,
        n_heads: 2,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        ffn_mult: 2,
        max_seq_len: 8,
        depth_grid: [2, 2],
        vocab: Vocabulary::new(16, 3, 4, 4)?,
        ..SolverConfig::default()
    };
    let model = SolverModel::<f32>::build(cfg, 3)?.cast::<f64>();
    let images = Tensor::<f64>::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
    let v = model.config.vocab;
    let seq = |ids: [usize; 4]| -> Result<TokenSequence> {
        let ids = ids.iter().map(|&i| v.id(Section::Depth, i)).collect::<Result<Vec<_>>>()?;
        TokenSequence::new(Task::Dep, ids, vec![true; 4])
    };
    let seqs = [seq([0, 3, 1, 2])?, seq([2, 2, 0, 1])?];
    let values: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    grad_check(
        |g, vars| {
            let p = ParamVars::from_vars(vars.to_vec());
            let x = g.constant(images.clone());
            let mem = model.encode_image(g, &p, x)?;
            let (logits, targets) = if parallel {
                (model.parallel_depth_logits(g, &p, mem)?, seqs.iter().flat_map(|s| s.ids.clone()).collect::<Vec<_>>())
            } else {
                let tf = model.teacher_forced(g, &p, mem, &[&seqs[0], &seqs[1]])?;
                (tf.logits, tf.targets)
            };
            g.masked_cross_entropy(logits, &targets, &vec![false; targets.len()])
        },
        &values,
        GRAD_EPS,
    )
}

fn aux_check() -> Result<f64> {
    let tok = TokenizerModel::<f32>::build(tiny_tokenizer(OutputKind::Depth), 9)?.cast::<f64>();
    let v = Vocabulary::new(16, 3, 4, 8)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Tensor::<f64>::uniform(vec![6, v.size()], -2.0, 2.0, &mut rng);
    let target: Vec<f64> = Tensor::<f64>::uniform(vec![64], 0.0, 1.0, &mut rng).into_data();
    let valid: Vec<bool> = (0..64).map(|i| i % 7 != 0).collect();
    grad_check(
        |g, vars| {
            let tp = tok.params.bind(g, false);
            aux_loss(g, vars[0], &[5, 0, 2, 3], v.range(Section::Depth), &tok, &tp, (1, 2, 2), &target, &valid)
        },
        &[logits],
        GRAD_EPS,
    )
}

/// Finite-difference checks of every autodiff primitive and of the
/// composed tokenizer, solver and auxiliary-loss toys.
pub fn gradient_checks() -> Vec<Check> {
    let ids = [2usize, 0, 3, 3, 1];
    vec![
        primitive("add_broadcast", [&[2, 3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        primitive("sub", [&[3, 4], &[3, 4]], |g, v| g.sub(v[0], v[1])),
        primitive("mul_broadcast", [&[2, 3, 4], &[4]], |g, v| g.mul(v[0], v[1])),
        primitive("scale_mean", [&[3, 5]], |g, v| {
            let s = g.scale(v[0], 0.7);
            let m = g.mean(s);
            let q = g.mul(v[0], v[0])?;
            let t = g.add(q, m)?;
            Ok(t)
        }),
        primitive("reshape_permute", [&[2, 3, 4]], |g, v| {
            let r = g.reshape(v[0], vec![3, 2, 4])?;
            g.permute(r, &[2, 0, 1])
        }),
        primitive("matmul", [&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        primitive("linear", [&[2, 3, 4], &[4, 5], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        primitive("relu", [&[4, 5]], |g, v| Ok(g.relu(v[0]))),
        primitive("sigmoid", [&[4, 5]], |g, v| Ok(g.sigmoid(v[0]))),
        primitive("softmax", [&[3, 4, 5]], |g, v| g.softmax(v[0], 1)),
        primitive("layer_norm", [&[3, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        primitive("group_norm", [&[2, 4, 3, 3], &[4], &[4]], |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5)),
        primitive("conv2d", [&[1, 2, 6, 6], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        primitive("conv_transpose2d", [&[1, 2, 3, 3], &[2, 3, 4, 4], &[3]], |g, v| {
            g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1)
        }),
        primitive("gather", [&[5, 3]], |g, v| g.gather(v[0], &[4, 0, 4, 2])),
        primitive("embedding", [&[4, 3]], move |g, v| g.embedding(v[0], &ids)),
        primitive("slice_last", [&[3, 7]], |g, v| g.slice_last(v[0], 2..6)),
        primitive("attention", [&[2, 3, 4], &[2, 5, 4], &[2, 5, 4]], |g, v| g.attention(v[0], v[1], v[2], false)),
        primitive("attention_causal", [&[2, 4, 4], &[2, 4, 4], &[2, 4, 4]], |g, v| g.attention(v[0], v[1], v[2], true)),
        primitive("embed_soft", [&[3, 4], &[4, 2]], |g, v| {
            let p = g.softmax(v[0], 1)?;
            embed_soft(g, p, v[1])
        }),
        primitive("cross_entropy", [&[4, 6]], |g, v| g.masked_cross_entropy(v[0], &[1, 5, 0, 2], &[false, true, false, false])),
        primitive("masked_mse", [&[2, 3]], |g, v| g.masked_mse(v[0], &[0.1, 0.5, -0.2, 0.3, 0.0, 1.0], &[true, false, true, true, true, false])),
        primitive("bce_with_logits", [&[2, 3]], |g, v| {
            g.masked_bce_with_logits(v[0], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0], &[true, true, false, true, true, true])
        }),
        ("tokenizer_depth", Box::new(|| tokenizer_check(OutputKind::Depth))),
        ("tokenizer_mask", Box::new(|| tokenizer_check(OutputKind::Mask))),
        ("solver_teacher_forced", Box::new(|| solver_check(false))),
        ("solver_parallel", Box::new(|| solver_check(true))),
        ("aux_loss_through_detokenizer", Box::new(aux_check)),
    ]
}

/// Runs every check, calling `report` as each finishes.
pub fn gradient_suite(mut report: impl FnMut(&str, f64)) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    for (name, f) in gradient_checks() {
        let err = f()?;
        report(name, err);
        out.push((name.to_string(), err));
    }
    Ok(out)
}
