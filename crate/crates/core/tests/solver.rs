use aitok_core::scene::{gen_scene, SceneSpec, SyntheticScene};
use aitok_core::seq::{Section, Task, TokenSequence, Vocabulary, EOS, RECORD_LEN};
use aitok_core::solver::{
    aux_loss, constrain, decode_autoregressive, decode_parallel_depth, infer, solver_loss, train_solver, DecodeMode,
    DecodeOptions, LossConfig, SolverConfig, SolverDataset, SolverModel, SolverState, TaskOutput, TaskWeights, Tokenizers,
};
use aitok_core::tensor::gradcheck::grad_check;
use aitok_core::tensor::io::Archive;
use aitok_core::tensor::optim::{epoch_rng, Schedule, TrainConfig};
use aitok_core::tensor::ParamVars;
use aitok_core::tokenizer::{OutputKind, TokenizerConfig, TokenizerModel};
use aitok_core::{Error, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    Vocabulary::new(16, 3, 4, 4).unwrap()
}

fn vid(v: &Vocabulary, s: Section, offset: usize) -> usize {
    v.id(s, offset).unwrap()
}

fn tiny_solver() -> SolverConfig {
    SolverConfig {
        image_size: 16,
        patch: 8,
        embed_dim: 8,
        n_heads: 2,
        n_encoder_blocks: 1,
        n_decoder_blocks: 1,
        ffn_mult: 2,
        max_seq_len: 48,
        depth_grid: [2, 2],
        vocab: vocab(),
        ..SolverConfig::default()
    }
}

fn tiny_tokenizer(task: OutputKind, ratio: usize) -> TokenizerConfig {
    let mut c = TokenizerConfig::depth().with_ratio(ratio);
    c.task = task;
    c.channels = vec![8; c.n_conv_layers];
    c.n_resblocks = 1;
    c.codebook_size = 4;
    c.code_dim = 2;
    c
}

struct Fixture {
    scenes: Vec<SyntheticScene>,
    depth: TokenizerModel<f32>,
    mask: TokenizerModel<f32>,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let spec = SceneSpec { image_size: 16, max_objects: 2, ..SceneSpec::default() };
        Fixture {
            scenes: (0..n as u64).map(|s| gen_scene(&spec, s).unwrap()).collect(),
            depth: TokenizerModel::build(tiny_tokenizer(OutputKind::Depth, 8), 1).unwrap(),
            mask: TokenizerModel::build(tiny_tokenizer(OutputKind::Mask, 16), 2).unwrap(),
        }
    }

    fn toks(&self) -> Tokenizers<'_> {
        Tokenizers { depth: Some(&self.depth), mask: Some(&self.mask) }
    }

    fn data(&self) -> SolverDataset {
        SolverDataset::from_scenes(&self.scenes, Some(&self.depth), true).unwrap()
    }
}

fn loss_cfg() -> LossConfig {
    LossConfig { instance_slots: 2, ..LossConfig::default() }
}

fn train_cfg(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig { lr: 3e-3, epochs, batch_size: 4, schedule: Schedule::Cosine, seed, ..TrainConfig::default() }
}

fn memory(model: &SolverModel<f32>, images: &Tensor<f32>) -> Tensor<f32> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let m = model.encode_image(&mut g, &p, x).unwrap();
    g.value(m).clone()
}

fn depth_seq(ids: &[usize]) -> TokenSequence {
    let v = vocab();
    let ids: Vec<usize> = ids.iter().map(|&i| vid(&v, Section::Depth, i)).collect();
    let n = ids.len();
    TokenSequence::new(Task::Dep, ids, vec![true; n]).unwrap()
}

#[test]
fn encoder_memory_shape_and_determinism() {
    let cfg = SolverConfig { image_size: 32, ..tiny_solver() };
    assert_eq!(cfg.memory_len(), 16);
    let model = SolverModel::<f32>::build(cfg, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let one = Tensor::<f32>::uniform(vec![1, 3, 32, 32], 0.0, 1.0, &mut rng);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let m = memory(&model, &Tensor::new(vec![2, 3, 32, 32], two).unwrap());
    assert_eq!(m.shape(), [2, 16, 8]);
    assert_eq!(m.data()[..128], m.data()[128..]);

    assert!(matches!(SolverModel::<f32>::build(SolverConfig { image_size: 30, ..tiny_solver() }, 0), Err(Error::Config(_))));
    assert!(matches!(SolverModel::<f32>::build(SolverConfig { n_heads: 3, ..tiny_solver() }, 0), Err(Error::Config(_))));
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(Tensor::zeros(vec![1, 3, 16, 16]));
    assert!(matches!(model.encode_image(&mut g, &p, x), Err(Error::Shape { .. })));
}

#[test]
fn solver_gradient_check_through_stem_and_blocks() {
    let model = SolverModel::<f32>::build(tiny_solver(), 3).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let images = Tensor::<f64>::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng);
    let seqs = [depth_seq(&[0, 3, 1, 2]), depth_seq(&[2, 2, 0, 1])];
    let values: Vec<Tensor<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    for parallel in [false, true] {
        let err = grad_check(
            |g, vars| {
                let p = ParamVars::from_vars(vars.to_vec());
                let x = g.constant(images.clone());
                let mem = model.encode_image(g, &p, x)?;
                let (logits, targets) = if parallel {
                    let l = model.parallel_depth_logits(g, &p, mem)?;
                    (l, seqs.iter().flat_map(|s| s.ids.clone()).collect::<Vec<_>>())
                } else {
                    let tf = model.teacher_forced(g, &p, mem, &[&seqs[0], &seqs[1]])?;
                    (tf.logits, tf.targets)
                };
                g.masked_cross_entropy(logits, &targets, &vec![false; targets.len()])
            },
            &values,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "parallel={parallel}: {err:e}");
    }
}

#[test]
fn aux_loss_gradient_flows_through_the_frozen_detokenizer() {
    let tok = TokenizerModel::<f32>::build(tiny_tokenizer(OutputKind::Depth, 4), 9).unwrap().cast::<f64>();
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits = Tensor::<f64>::uniform(vec![6, v.size()], -2.0, 2.0, &mut rng);
    let target: Vec<f64> = Tensor::<f64>::uniform(vec![64], 0.0, 1.0, &mut rng).into_data();
    let valid: Vec<bool> = (0..64).map(|i| i % 7 != 0).collect();
    let rows = [5, 0, 2, 3];
    let err = grad_check(
        |g, vars| {
            let tp = tok.params.bind(g, false);
            aux_loss(g, vars[0], &rows, v.range(Section::Depth), &tok, &tp, (1, 2, 2), &target, &valid)
        },
        std::slice::from_ref(&logits),
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err:e}");

    // zero when the detokenized prediction is the target
    let mut g = Graph::new();
    let tp = tok.params.bind(&mut g, false);
    let l = g.constant(logits.clone());
    let sel = g.gather(l, &rows).unwrap();
    let sel = g.slice_last(sel, v.range(Section::Depth)).unwrap();
    let probs = g.softmax(sel, 1).unwrap();
    let out = tok.decode_soft_on(&mut g, &tp, probs, 1, 2, 2).unwrap();
    let out = g.sigmoid(out);
    let exact = g.value(out).data().to_vec();
    let a = aux_loss(&mut g, l, &rows, v.range(Section::Depth), &tok, &tp, (1, 2, 2), &exact, &[true; 64]).unwrap();
    assert_eq!(g.value(a).item(), 0.0);
}

#[test]
fn teacher_forcing_is_causal() {
    let model = SolverModel::<f32>::build(tiny_solver(), 4).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let images = Tensor::<f64>::uniform(vec![1, 3, 16, 16], 0.0, 1.0, &mut rng);
    let logits_for = |seq: &TokenSequence| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let mem = model.encode_image(&mut g, &p, x).unwrap();
        let tf = model.teacher_forced(&mut g, &p, mem, &[seq]).unwrap();
        g.value(tf.logits).clone()
    };
    let base = logits_for(&depth_seq(&[0, 1, 2, 3]));
    let v = vocab().size();
    for j in 0..4 {
        let mut ids = vec![0, 1, 2, 3];
        ids[j] = (ids[j] + 2) % 4;
        let other = logits_for(&depth_seq(&ids));
        // logits at step t only see targets before t
        for t in 0..=j {
            assert_eq!(base.data()[t * v..(t + 1) * v], other.data()[t * v..(t + 1) * v], "step {t}, perturbed {j}");
        }
        if j < 3 {
            assert_ne!(base.data()[(j + 1) * v..], other.data()[(j + 1) * v..]);
        }
    }
}

#[test]
fn loss_masked_positions_receive_no_gradient() {
    let fx = Fixture::new(4);
    let model = SolverModel::<f32>::build(tiny_solver(), 6).unwrap();
    let v = vocab();
    // one real record and one noise record
    let rec = |class: usize, masked: bool| {
        let mut ids = vec![vid(&v, Section::Coord, 2), vid(&v, Section::Coord, 3), vid(&v, Section::Coord, 9), vid(&v, Section::Coord, 12)];
        ids.push(vid(&v, Section::Class, class));
        ids.extend((0..16).map(|k| vid(&v, Section::Mask, k % 4)));
        let mut mask = vec![true; 5];
        mask.extend(std::iter::repeat_n(!masked, 16));
        (ids, mask)
    };
    let (mut ids, mut mask) = rec(1, false);
    let (nids, nmask) = rec(3, true);
    ids.extend(nids);
    mask.extend(nmask);
    ids.push(EOS);
    mask.push(true);
    let seq = TokenSequence::new(Task::Ins, ids, mask.clone()).unwrap();

    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let x = g.constant(SolverDataset::from_scenes(&fx.scenes[..1], None, false).unwrap().images(&[0]).unwrap());
    let mem = model.encode_image(&mut g, &p, x).unwrap();
    let tf = model.teacher_forced(&mut g, &p, mem, &[&seq]).unwrap();
    let loss = g.masked_cross_entropy(tf.logits, &tf.targets, &tf.ignore).unwrap();
    let grads = g.backward(loss).unwrap();
    let dl = grads.get(tf.logits).unwrap();
    let vs = v.size();
    for (t, &keep) in mask.iter().enumerate() {
        let row = &dl[t * vs..(t + 1) * vs];
        assert_eq!(row.iter().all(|&x| x == 0.0), !keep, "position {t}");
    }
}

#[test]
fn decoding_modes_and_constraints() {
    let model = SolverModel::<f32>::build(SolverConfig { depth_grid: [4, 4], ..tiny_solver() }, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mem = memory(&model, &Tensor::<f32>::uniform(vec![3, 3, 16, 16], 0.0, 1.0, &mut rng));

    let hard = decode_autoregressive(&model, &mem, Task::Dep, &DecodeOptions::default()).unwrap();
    assert_eq!(hard.forward_passes, 16);
    for s in &hard.sequences {
        assert_eq!(s.len(), 16);
        s.check(model.vocab()).unwrap();
    }
    // near-zero temperature makes every step one-hot, so soft feeding equals hard feeding
    let cold = DecodeOptions { temperature: 1e-6, ..DecodeOptions::default() };
    let a = decode_autoregressive(&model, &mem, Task::Ins, &DecodeOptions { mode: DecodeMode::Hard, ..cold }).unwrap();
    let b = decode_autoregressive(&model, &mem, Task::Ins, &DecodeOptions { mode: DecodeMode::Soft, ..cold }).unwrap();
    assert_eq!(a.sequences, b.sequences);
    for s in &b.sequences {
        assert!(s.probs.as_ref().unwrap().iter().all(|p| p.contains(&1.0)));
    }
    let warm = decode_autoregressive(&model, &mem, Task::Dep, &DecodeOptions { mode: DecodeMode::Soft, ..DecodeOptions::default() });
    assert_eq!(warm.unwrap().sequences[0].len(), 16);

    // instance grammar
    for (s, &trunc) in a.sequences.iter().zip(&a.truncated) {
        let v = model.vocab();
        for (t, &id) in s.ids.iter().enumerate() {
            assert!(constrain(v, Task::Ins, t, 8).iter().any(|r| r.contains(&id)), "id {id} at {t}");
        }
        if !trunc {
            assert_eq!(*s.ids.last().unwrap(), EOS);
            assert_eq!((s.len() - 1) % RECORD_LEN, 0);
        }
    }
    let none = decode_autoregressive(&model, &mem, Task::Ins, &DecodeOptions { max_instances: 0, ..DecodeOptions::default() }).unwrap();
    assert!(none.sequences.iter().all(|s| s.ids == [EOS]));
    assert!(matches!(
        decode_autoregressive(&model, &mem, Task::Dep, &DecodeOptions { temperature: 0.0, ..DecodeOptions::default() }),
        Err(Error::Config(_))
    ));
}

#[test]
fn generation_past_max_seq_len_is_flagged() {
    let model = SolverModel::<f32>::build(SolverConfig { max_seq_len: 10, ..tiny_solver() }, 8).unwrap();
    let mem = memory(&model, &Tensor::full(vec![1, 3, 16, 16], 0.5));
    let out = decode_autoregressive(&model, &mem, Task::Ins, &DecodeOptions::default()).unwrap();
    if out.sequences[0].len() == 10 {
        assert!(out.truncated[0]);
    } else {
        assert_eq!(out.sequences[0].ids, [EOS]);
    }
}

#[test]
fn parallel_depth_is_one_normalized_pass() {
    let model = SolverModel::<f32>::build(SolverConfig { depth_grid: [4, 4], ..tiny_solver() }, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mem = memory(&model, &Tensor::<f32>::uniform(vec![2, 3, 16, 16], 0.0, 1.0, &mut rng));
    let a = decode_parallel_depth(&model, &mem).unwrap();
    let b = decode_parallel_depth(&model, &mem).unwrap();
    assert_eq!(a.forward_passes, 1);
    assert_eq!(a.sequences, b.sequences);
    let depth = model.vocab().range(Section::Depth);
    for s in &a.sequences {
        assert_eq!(s.len(), 16);
        for p in s.probs.as_ref().unwrap() {
            let sum: f64 = p.iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(p.iter().enumerate().all(|(i, &x)| depth.contains(&i) || x == 0.0));
        }
    }
}

#[test]
fn infer_produces_task_outputs() {
    let fx = Fixture::new(3);
    let data = fx.data();
    let model = SolverModel::<f32>::build(tiny_solver(), 10).unwrap();
    let images = data.images(&[0, 1, 2]).unwrap();
    for options in [
        DecodeOptions::default(),
        DecodeOptions { mode: DecodeMode::Soft, soft_detokenize: true, ..DecodeOptions::default() },
        DecodeOptions { parallel: true, soft_detokenize: true, ..DecodeOptions::default() },
    ] {
        let out = infer(&model, &images, Task::Dep, &options, &fx.toks()).unwrap();
        assert_eq!(out.len(), 3);
        for o in out {
            let TaskOutput::Depth(d) = o else { panic!("expected depth") };
            assert_eq!(d.len(), 256);
            assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
    let opts = DecodeOptions { max_instances: 2, ..DecodeOptions::default() };
    let out = infer(&model, &images, Task::Ins, &opts, &fx.toks()).unwrap();
    for o in out {
        let TaskOutput::Instances(list) = o else { panic!("expected instances") };
        assert!(list.len() <= 2);
    }
    let par = DecodeOptions { parallel: true, ..DecodeOptions::default() };
    assert!(matches!(infer(&model, &images, Task::Ins, &par, &fx.toks()), Err(Error::Config(_))));
    let only_depth = Tokenizers { depth: Some(&fx.depth), mask: None };
    assert!(matches!(infer(&model, &images, Task::Ins, &opts, &only_depth), Err(Error::Config(_))));
    let swapped = Tokenizers { depth: Some(&fx.mask), mask: None };
    assert!(matches!(infer(&model, &images, Task::Dep, &opts, &swapped), Err(Error::Config(_))));
}

#[test]
fn zero_aux_weight_is_pure_token_loss() {
    let fx = Fixture::new(8);
    let data = fx.data();
    let run = |aux: f64| {
        let mut model = SolverModel::<f32>::build(tiny_solver(), 11).unwrap();
        let lc = LossConfig { aux_loss_weight: TaskWeights { dep: aux, ins: aux }, ..loss_cfg() };
        let h = train_solver(&mut model, &data, &fx.toks(), &lc, &train_cfg(2, 1), &[Task::Dep], &mut SolverState::default(), |_, _, _| Ok(()))
            .unwrap();
        (h, model)
    };
    let (h0, m0) = run(0.0);
    assert!(h0.iter().all(|e| e.aux_loss.is_none() && e.loss == e.dep_token_loss.unwrap()));
    let (h1, m1) = run(0.5);
    assert!(h1.iter().all(|e| e.aux_loss.unwrap() > 0.0));
    assert_ne!(m0.params.iter().next().unwrap().value, m1.params.iter().next().unwrap().value);
}

#[test]
fn token_loss_decreases_median_of_three_seeds() {
    let fx = Fixture::new(16);
    let data = fx.data();
    let mut drops: Vec<f64> = [1u64, 2, 3]
        .iter()
        .map(|&seed| {
            let mut model = SolverModel::<f32>::build(tiny_solver(), seed).unwrap();
            let h = train_solver(
                &mut model,
                &data,
                &fx.toks(),
                &loss_cfg(),
                &train_cfg(6, seed),
                &[Task::Dep, Task::Ins],
                &mut SolverState::default(),
                |_, _, _| Ok(()),
            )
            .unwrap();
            let first = h[0].dep_token_loss.unwrap() + h[0].ins_token_loss.unwrap();
            let last = h[5].dep_token_loss.unwrap() + h[5].ins_token_loss.unwrap();
            first - last
        })
        .collect();
    drops.sort_by(f64::total_cmp);
    assert!(drops[1] > 0.0, "{drops:?}");
}

#[test]
fn task_forward_is_isolated_from_other_task_batches() {
    let fx = Fixture::new(4);
    let data = fx.data();
    let model = SolverModel::<f32>::build(tiny_solver(), 12).unwrap();
    let lc = loss_cfg();
    let depth_loss = |with_ins: bool| {
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true);
        let mut rng = epoch_rng(0, 0);
        if with_ins {
            solver_loss(&mut g, &p, &model, &data, &[2, 3], Task::Ins, &fx.toks(), &lc, &mut rng).unwrap();
        }
        let l = solver_loss(&mut g, &p, &model, &data, &[0, 1], Task::Dep, &fx.toks(), &lc, &mut rng).unwrap();
        g.value(l.total).item()
    };
    assert_eq!(depth_loss(false).to_bits(), depth_loss(true).to_bits());
}

#[test]
fn training_resumes_bit_identically_and_checks_inputs() {
    let fx = Fixture::new(8);
    let data = fx.data();
    let lc = loss_cfg();
    let tasks = [Task::Dep, Task::Ins];
    let mut full = SolverModel::<f32>::build(tiny_solver(), 13).unwrap();
    let h = train_solver(&mut full, &data, &fx.toks(), &lc, &train_cfg(2, 5), &tasks, &mut SolverState::default(), |_, _, _| Ok(()))
        .unwrap();

    let mut part = SolverModel::<f32>::build(tiny_solver(), 13).unwrap();
    let mut state = SolverState::default();
    let mut bytes = Vec::new();
    train_solver(&mut part, &data, &fx.toks(), &lc, &train_cfg(1, 5), &tasks, &mut state, |_, m, _| {
        bytes = m.to_archive(serde_json::json!({}), true)?.to_bytes()?;
        Ok(())
    })
    .unwrap();
    let mut resumed = SolverModel::<f32>::from_archive(&Archive::from_bytes(&bytes).unwrap()).unwrap();
    let h2 = train_solver(&mut resumed, &data, &fx.toks(), &lc, &train_cfg(2, 5), &tasks, &mut state, |_, _, _| Ok(())).unwrap();
    assert_eq!(h2.len(), 1);
    assert_eq!(h2[0], h[1]);
    for (a, b) in full.params.iter().zip(resumed.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }

    let no_mask = Tokenizers { depth: Some(&fx.depth), mask: None };
    let err = train_solver(&mut full, &data, &no_mask, &lc, &train_cfg(3, 5), &tasks, &mut SolverState::default(), |_, _, _| Ok(()));
    assert!(matches!(err, Err(Error::Config(_))));
    let depth_only = SolverDataset::from_scenes(&fx.scenes, Some(&fx.depth), false).unwrap();
    let err = train_solver(&mut full, &depth_only, &fx.toks(), &lc, &train_cfg(3, 5), &tasks, &mut SolverState::default(), |_, _, _| Ok(()));
    assert!(matches!(err, Err(Error::Contract(_))));
}

#[test]
fn checkpoint_roundtrip_preserves_decoding() {
    let model = SolverModel::<f32>::build(tiny_solver(), 14).unwrap();
    let bytes = model.to_archive(serde_json::json!({"seed": 14}), false).unwrap().to_bytes().unwrap();
    let a = Archive::<f32>::from_bytes(&bytes).unwrap();
    assert_eq!(a.manifest["vocabulary"], serde_json::to_value(vocab()).unwrap());
    let back = SolverModel::<f32>::from_archive(&a).unwrap();
    assert_eq!(back.config, model.config);
    let mem = memory(&model, &Tensor::full(vec![1, 3, 16, 16], 0.25));
    let opts = DecodeOptions::default();
    assert_eq!(
        decode_autoregressive(&model, &mem, Task::Dep, &opts).unwrap().sequences,
        decode_autoregressive(&back, &mem, Task::Dep, &opts).unwrap().sequences
    );
    let tok = TokenizerModel::<f32>::build(tiny_tokenizer(OutputKind::Depth, 4), 0).unwrap();
    let wrong = tok.to_archive(serde_json::json!({}), false).unwrap();
    assert!(matches!(SolverModel::<f32>::from_archive(&wrong), Err(Error::Format(_))));
}
