use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::decode::{decode_autoregressive, decode_parallel_depth, DecodeOptions};
use super::SolverModel;
use crate::error::{Error, Result};
use crate::metrics::{depth_metrics, mask_metrics, mean_depth_metrics, default_iou_thresholds, DepthMetrics, MaskInstance, MaskMetrics};
use crate::scene::{InstanceAnnotation, SyntheticScene, MASK_SIDE, MAX_DEPTH};
use crate::seq::{
    decode_instances, depth_slice_probs, encode_depth, encode_records, instance_records, DecodedInstance, Section, Task,
    TokenSequence, MASK_TOKENS, RECORD_LEN,
};
use crate::tensor::optim::{adam_step, epoch_rng, TrainConfig};
use crate::tensor::{Float, Graph, ParamVars, Tensor, Var};
use crate::tokenizer::{OutputKind, TokenGrid, TokenizerModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub dep: f64,
    pub ins: f64,
}

impl TaskWeights {
    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::Dep => self.dep,
            Task::Ins => self.ins,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub token_loss_weight: TaskWeights,
    /// Weight of the detokenized-output loss; 0 disables it.
    pub aux_loss_weight: TaskWeights,
    /// Train depth through the parallel head instead of teacher forcing.
    pub parallel_depth: bool,
    /// Records per instance sequence; missing ones become noise records.
    pub instance_slots: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            token_loss_weight: TaskWeights { dep: 1.0, ins: 5.0 },
            aux_loss_weight: TaskWeights { dep: 0.2, ins: 0.0 },
            parallel_depth: false,
            instance_slots: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.token_loss_weight.dep, self.token_loss_weight.ins, self.aux_loss_weight.dep, self.aux_loss_weight.ins];
        if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {w:?}")));
        }
        Ok(())
    }
}

/// Frozen tokenizers supplying targets and the auxiliary decoding path.
#[derive(Clone, Copy, Default)]
pub struct Tokenizers<'a> {
    pub depth: Option<&'a TokenizerModel<f32>>,
    pub mask: Option<&'a TokenizerModel<f32>>,
}

impl<'a> Tokenizers<'a> {
    fn for_task(&self, task: Task) -> Result<&'a TokenizerModel<f32>> {
        let (t, kind) = match task {
            Task::Dep => (self.depth, OutputKind::Depth),
            Task::Ins => (self.mask, OutputKind::Mask),
        };
        let t = t.ok_or_else(|| Error::Config(format!("no tokenizer for task {task:?}")))?;
        if t.config.task != kind {
            return Err(Error::Config(format!("tokenizer for {task:?} is a {:?} tokenizer", t.config.task)));
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthTarget {
    /// Normalized depth, 0 at invalid pixels.
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
    pub tokens: TokenGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSample {
    /// `[C, S, S]`, row-major.
    pub image: Vec<f32>,
    pub depth: Option<DepthTarget>,
    pub instances: Option<Vec<InstanceAnnotation>>,
    /// Full-resolution mask per instance, for evaluation.
    pub masks: Vec<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverDataset {
    pub image_size: usize,
    pub channels: usize,
    pub samples: Vec<SolverSample>,
}

impl SolverDataset {
    /// Builds samples from scenes; depth targets are tokenized with
    /// `depth_tok` when given, instance targets kept when `instances`.
    pub fn from_scenes(scenes: &[SyntheticScene], depth_tok: Option<&TokenizerModel<f32>>, instances: bool) -> Result<Self> {
        let first = scenes.first().ok_or_else(|| Error::Contract("empty scene list".into()))?;
        let s = first.image.shape().to_vec();
        let mut samples = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(32) {
            let grids = match depth_tok {
                Some(t) => {
                    let mut data = Vec::with_capacity(chunk.len() * s[1] * s[2]);
                    for sc in chunk {
                        data.extend(depth_input(&sc.depth.normalized(), &sc.depth.valid));
                    }
                    Some(t.tokenize(&Tensor::new(vec![chunk.len(), 1, s[1], s[2]], data)?)?)
                }
                None => None,
            };
            for (k, sc) in chunk.iter().enumerate() {
                if sc.image.shape() != s.as_slice() {
                    return Err(Error::shape("solver_dataset", format!("image {:?} vs {s:?}", sc.image.shape())));
                }
                let depth = grids.as_ref().map(|g| DepthTarget {
                    values: depth_input(&sc.depth.normalized(), &sc.depth.valid),
                    valid: sc.depth.valid.clone(),
                    tokens: g[k].clone(),
                });
                samples.push(SolverSample {
                    image: sc.image.data().to_vec(),
                    depth,
                    instances: instances.then(|| sc.instances.clone()),
                    masks: if instances { sc.masks.clone() } else { Vec::new() },
                });
            }
        }
        Ok(SolverDataset { image_size: s[1], channels: s[0], samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn images(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(idx.len() * self.channels * self.image_size * self.image_size);
        for &i in idx {
            data.extend_from_slice(&self.samples[i].image);
        }
        Tensor::new(vec![idx.len(), self.channels, self.image_size, self.image_size], data)
    }

    fn has(&self, task: Task) -> bool {
        self.samples.iter().all(|s| match task {
            Task::Dep => s.depth.is_some(),
            Task::Ins => s.instances.is_some(),
        })
    }
}

fn depth_input(normalized: &[f32], valid: &[bool]) -> Vec<f32> {
    normalized.iter().zip(valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect()
}

/// Detokenizer-space loss of the solver's predicted distributions: the
/// logits at `rows` are restricted to `section` (a softmax over the slice
/// equals the renormalized full softmax), decoded by the frozen tokenizer
/// and compared with the raw target.
#[allow(clippy::too_many_arguments)]
pub fn aux_loss<T: Float>(
    g: &mut Graph<T>,
    logits: Var,
    rows: &[usize],
    section: Range<usize>,
    tok: &TokenizerModel<T>,
    tok_params: &ParamVars,
    grid: (usize, usize, usize),
    target: &[T],
    valid: &[bool],
) -> Result<Var> {
    let sel = g.gather(logits, rows)?;
    let sel = g.slice_last(sel, section)?;
    let probs = g.softmax(sel, 1)?;
    let (n, h, w) = grid;
    let out = tok.decode_soft_on(g, tok_params, probs, n, h, w)?;
    tok.reconstruction_loss(g, out, target, valid)
}

pub struct StepLoss {
    pub total: Var,
    pub token: Var,
    pub aux: Option<Var>,
}

/// Loss of one single-task batch on `g`. Instance records are drawn with
/// `rng` (shuffle and noise boxes).
#[allow(clippy::too_many_arguments)]
pub fn solver_loss(
    g: &mut Graph<f32>,
    p: &ParamVars,
    model: &SolverModel<f32>,
    data: &SolverDataset,
    idx: &[usize],
    task: Task,
    toks: &Tokenizers,
    loss_cfg: &LossConfig,
    rng: &mut impl rand::Rng,
) -> Result<StepLoss> {
    let tok = toks.for_task(task)?;
    let vocab = model.config.vocab;
    let images = g.constant(data.images(idx)?);
    let memory = model.encode_image(g, p, images)?;
    let aux_w = loss_cfg.aux_loss_weight.get(task);
    let tp = if aux_w > 0.0 { Some(tok.params.bind(g, false)) } else { None };

    let (token, aux) = match task {
        Task::Dep => {
            let targets: Vec<&DepthTarget> = idx.iter().map(|&i| data.samples[i].depth.as_ref().unwrap()).collect();
            let seqs = targets.iter().map(|t| encode_depth(&t.tokens, &vocab)).collect::<Result<Vec<_>>>()?;
            let q = model.config.depth_len();
            if seqs.iter().any(|s| s.len() != q) {
                return Err(Error::shape("solver_loss", format!("depth sequences must have {q} tokens")));
            }
            let (logits, len, ids, ignore) = if loss_cfg.parallel_depth {
                let l = model.parallel_depth_logits(g, p, memory)?;
                let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
                let n = ids.len();
                (l, q, ids, vec![false; n])
            } else {
                let refs: Vec<&TokenSequence> = seqs.iter().collect();
                let tf = model.teacher_forced(g, p, memory, &refs)?;
                (tf.logits, tf.len, tf.targets, tf.ignore)
            };
            let ce = g.masked_cross_entropy(logits, &ids, &ignore)?;
            let aux = match &tp {
                Some(tp) => {
                    let rows: Vec<usize> = (0..idx.len()).flat_map(|b| (0..q).map(move |j| b * len + j)).collect();
                    let target: Vec<f32> = targets.iter().flat_map(|t| t.values.iter().copied()).collect();
                    let valid: Vec<bool> = targets.iter().flat_map(|t| t.valid.iter().copied()).collect();
                    let [gh, gw] = model.config.depth_grid;
                    let range = vocab.range(Section::Depth);
                    Some(aux_loss(g, logits, &rows, range, tok, tp, (idx.len(), gh, gw), &target, &valid)?)
                }
                None => None,
            };
            (ce, aux)
        }
        Task::Ins => {
            let mut seqs = Vec::with_capacity(idx.len());
            let mut real: Vec<Vec<InstanceAnnotation>> = Vec::with_capacity(idx.len());
            for &i in idx {
                let inst = data.samples[i].instances.as_ref().unwrap();
                let n_noise = loss_cfg.instance_slots.saturating_sub(inst.len());
                let recs = instance_records(inst, n_noise, vocab.background(), rng);
                seqs.push(encode_records(&recs, &vocab, tok)?);
                real.push(recs.into_iter().filter(|r| !r.is_noise).collect());
            }
            let refs: Vec<&TokenSequence> = seqs.iter().collect();
            let tf = model.teacher_forced(g, p, memory, &refs)?;
            let ce = g.masked_cross_entropy(tf.logits, &tf.targets, &tf.ignore)?;
            let n_real: usize = real.iter().map(|r| r.len()).sum();
            let aux = match &tp {
                Some(tp) if n_real > 0 => {
                    let mut rows = Vec::with_capacity(n_real * MASK_TOKENS);
                    let mut target = Vec::with_capacity(n_real * MASK_SIDE * MASK_SIDE);
                    for (b, recs) in real.iter().enumerate() {
                        for (r, rec) in recs.iter().enumerate() {
                            rows.extend((0..MASK_TOKENS).map(|k| b * tf.len + r * RECORD_LEN + 5 + k));
                            target.extend(rec.mask64.iter().map(|&m| m as u8 as f32));
                        }
                    }
                    let valid = vec![true; target.len()];
                    let side = (MASK_TOKENS as f64).sqrt() as usize;
                    let range = vocab.range(Section::Mask);
                    Some(aux_loss(g, tf.logits, &rows, range, tok, tp, (n_real, side, side), &target, &valid)?)
                }
                _ => None,
            };
            (ce, aux)
        }
    };
    let tw = loss_cfg.token_loss_weight.get(task) as f32;
    let mut total = g.scale(token, tw);
    if let Some(a) = aux {
        let a = g.scale(a, aux_w as f32);
        total = g.add(total, a)?;
    }
    Ok(StepLoss { total, token, aux })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SolverState {
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub dep_token_loss: Option<f64>,
    pub ins_token_loss: Option<f64>,
    pub aux_loss: Option<f64>,
    pub lr: f64,
}

/// Trains until `cfg.epochs` epochs are complete. With several tasks the
/// per-task batches of an epoch are interleaved round-robin, one optimizer
/// step per batch.
#[allow(clippy::too_many_arguments)]
pub fn train_solver(
    model: &mut SolverModel<f32>,
    data: &SolverDataset,
    toks: &Tokenizers,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    tasks: &[Task],
    state: &mut SolverState,
    mut on_epoch: impl FnMut(&SolverEpoch, &SolverModel<f32>, &SolverState) -> Result<()>,
) -> Result<Vec<SolverEpoch>> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if data.is_empty() || tasks.is_empty() {
        return Err(Error::Contract("training needs data and at least one task".into()));
    }
    let ins_len = loss_cfg.instance_slots * RECORD_LEN + 1;
    if tasks.contains(&Task::Ins) && ins_len > model.config.max_seq_len {
        return Err(Error::Config(format!(
            "{} instance slots need {ins_len} tokens, max_seq_len is {}",
            loss_cfg.instance_slots, model.config.max_seq_len
        )));
    }
    for &t in tasks {
        toks.for_task(t)?;
        if !data.has(t) {
            return Err(Error::Contract(format!("dataset lacks targets for task {t:?}")));
        }
    }
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let lr = cfg.lr_at(epoch);
        let mut queues: Vec<Vec<(Task, Vec<usize>)>> = tasks
            .iter()
            .map(|&t| {
                let mut order: Vec<usize> = (0..data.len()).collect();
                order.shuffle(&mut rng);
                order.chunks(cfg.batch_size).map(|c| (t, c.to_vec())).rev().collect()
            })
            .collect();
        let mut schedule = Vec::new();
        while queues.iter().any(|q| !q.is_empty()) {
            for q in queues.iter_mut() {
                if let Some(b) = q.pop() {
                    schedule.push(b);
                }
            }
        }

        let mut sums = [(0.0f64, 0usize); 2];
        let (mut aux_sum, mut aux_n, mut total_sum) = (0.0f64, 0usize, 0.0f64);
        for (step, (task, idx)) in schedule.iter().enumerate() {
            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let l = solver_loss(&mut g, &p, model, data, idx, *task, toks, loss_cfg, &mut rng)?;
            let loss = g.value(l.total).item() as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, step, loss });
            }
            let grads = g.backward(l.total)?;
            model.params.clear_grad();
            model.params.accumulate(&p, &grads);
            adam_step(&mut model.params, lr, cfg)?;

            let slot = &mut sums[(*task == Task::Ins) as usize];
            slot.0 += g.value(l.token).item() as f64;
            slot.1 += 1;
            if let Some(a) = l.aux {
                aux_sum += g.value(a).item() as f64;
                aux_n += 1;
            }
            total_sum += loss;
        }
        let mean = |(s, n): (f64, usize)| (n > 0).then(|| s / n as f64);
        let m = SolverEpoch {
            epoch: epoch + 1,
            loss: total_sum / schedule.len().max(1) as f64,
            dep_token_loss: mean(sums[0]),
            ins_token_loss: mean(sums[1]),
            aux_loss: mean((aux_sum, aux_n)),
            lr,
        };
        state.epoch += 1;
        on_epoch(&m, model, state)?;
        history.push(m);
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskOutput {
    /// Normalized depth, row-major, at the tokenizer's output resolution.
    Depth(Vec<f32>),
    Instances(Vec<DecodedInstance>),
}

fn encode_memory(model: &SolverModel<f32>, images: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let m = model.encode_image(&mut g, &p, x)?;
    Ok(g.value(m).clone())
}

/// Image batch `[N,C,S,S]` → task outputs: encode, decode (parallel or
/// autoregressive), then detokenize from argmax ids or, with
/// `soft_detokenize`, from the restricted distributions.
pub fn infer(
    model: &SolverModel<f32>,
    images: &Tensor<f32>,
    task: Task,
    options: &DecodeOptions,
    toks: &Tokenizers,
) -> Result<Vec<TaskOutput>> {
    options.validate()?;
    let tok = toks.for_task(task)?;
    let memory = encode_memory(model, images)?;
    let vocab = model.config.vocab;
    let decoded = if options.parallel {
        if task != Task::Dep {
            return Err(Error::Config("parallel decoding is only defined for depth".into()));
        }
        decode_parallel_depth(model, &memory)?
    } else {
        decode_autoregressive(model, &memory, task, options)?
    };
    match task {
        Task::Dep => {
            let [gh, gw] = model.config.depth_grid;
            let n = decoded.sequences.len();
            let mut probs = Vec::with_capacity(n * gh * gw * vocab.depth_codes);
            for s in &decoded.sequences {
                let mut s = s.clone();
                if !options.soft_detokenize {
                    s.probs = None;
                }
                probs.extend(depth_slice_probs(&s, &vocab)?);
            }
            let out = tok.detokenize_soft(&Tensor::new(vec![n * gh * gw, vocab.depth_codes], probs)?, n, gh, gw)?;
            let plane = out.numel() / n.max(1);
            Ok(out.data().chunks(plane).map(|c| TaskOutput::Depth(c.to_vec())).collect())
        }
        Task::Ins => decoded
            .sequences
            .iter()
            .zip(&decoded.truncated)
            .map(|(s, &trunc)| {
                let mut s = s.clone();
                if trunc {
                    let keep = s.len() / RECORD_LEN * RECORD_LEN;
                    s.ids.truncate(keep);
                    s.loss_mask.truncate(keep);
                    if let Some(p) = s.probs.as_mut() {
                        p.truncate(keep);
                    }
                }
                if !options.soft_detokenize {
                    s.probs = None;
                }
                Ok(TaskOutput::Instances(decode_instances(&s, &vocab, tok, 0.0)?))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEval {
    /// Normalized RMSE pooled over all valid pixels.
    pub rmse: f64,
    /// Per-image metrics in meters, averaged.
    pub metrics: DepthMetrics,
}

pub fn evaluate_depth(model: &SolverModel<f32>, data: &SolverDataset, options: &DecodeOptions, toks: &Tokenizers) -> Result<DepthEval> {
    let (mut se, mut n) = (0.0f64, 0usize);
    let mut per_image = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let outs = infer(model, &data.images(chunk)?, Task::Dep, options, toks)?;
        for (&i, out) in chunk.iter().zip(outs) {
            let TaskOutput::Depth(pred) = out else { unreachable!() };
            let t = data.samples[i].depth.as_ref().ok_or_else(|| Error::Contract("sample lacks depth".into()))?;
            if pred.len() != t.values.len() {
                return Err(Error::shape("evaluate_depth", format!("{} predicted vs {} target pixels", pred.len(), t.values.len())));
            }
            for k in 0..pred.len() {
                if t.valid[k] {
                    se += (pred[k] as f64 - t.values[k] as f64).powi(2);
                    n += 1;
                }
            }
            let meters = |v: &[f32]| v.iter().map(|&x| x * MAX_DEPTH).collect::<Vec<f32>>();
            let gt_valid: Vec<bool> = t.valid.iter().zip(&t.values).map(|(&ok, &v)| ok && v > 0.0).collect();
            if gt_valid.iter().any(|&v| v) {
                per_image.push(depth_metrics(&meters(&pred), &meters(&t.values), &gt_valid)?);
            }
        }
    }
    let metrics = mean_depth_metrics(&per_image).ok_or_else(|| Error::Contract("no valid depth pixels".into()))?;
    Ok(DepthEval { rmse: (se / n.max(1) as f64).sqrt(), metrics })
}

/// Mask metrics averaged over images against the full-resolution masks.
pub fn evaluate_instances(
    model: &SolverModel<f32>,
    data: &SolverDataset,
    options: &DecodeOptions,
    toks: &Tokenizers,
) -> Result<MaskMetrics> {
    let s = data.image_size;
    let thresholds = default_iou_thresholds();
    let mut all = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(32) {
        let outs = infer(model, &data.images(chunk)?, Task::Ins, options, toks)?;
        for (&i, out) in chunk.iter().zip(outs) {
            let TaskOutput::Instances(pred) = out else { unreachable!() };
            let sample = &data.samples[i];
            let gt = sample.instances.as_ref().ok_or_else(|| Error::Contract("sample lacks instances".into()))?;
            let gt: Vec<MaskInstance> = gt
                .iter()
                .zip(&sample.masks)
                .map(|(a, m)| MaskInstance { class_id: a.class_id, mask: m.clone() })
                .collect();
            let pred: Vec<MaskInstance> =
                pred.iter().map(|d| MaskInstance { class_id: d.instance.class_id, mask: d.full_mask(s, s) }).collect();
            all.push(mask_metrics(&pred, &gt, &thresholds));
        }
    }
    let n = all.len().max(1) as f64;
    let mut ap_per_threshold = vec![0.0; thresholds.len()];
    for m in &all {
        for (a, v) in ap_per_threshold.iter_mut().zip(&m.ap_per_threshold) {
            *a += v / n;
        }
    }
    Ok(MaskMetrics {
        mean_iou: all.iter().map(|m| m.mean_iou).sum::<f64>() / n,
        ap: all.iter().map(|m| m.ap).sum::<f64>() / n,
        ap_per_threshold,
    })
}
