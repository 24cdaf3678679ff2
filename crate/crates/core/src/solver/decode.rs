use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::SolverModel;
use crate::error::{Error, Result};
use crate::seq::{Section, Task, TokenSequence, Vocabulary, EOS, RECORD_LEN};
use crate::tensor::{Float, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Feed the embedding of the argmax token.
    Hard,
    /// Feed the probability-weighted mean of the embedding table.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub max_instances: usize,
    /// Depth only: predict every position in one pass.
    pub parallel: bool,
    /// Detokenize from the carried distributions instead of argmax ids.
    pub soft_detokenize: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions { mode: DecodeMode::Hard, temperature: 1.0, max_instances: 8, parallel: false, soft_detokenize: false }
    }
}

impl DecodeOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DecodeOutput {
    pub sequences: Vec<TokenSequence>,
    /// Set where generation hit `max_seq_len` before finishing.
    pub truncated: Vec<bool>,
    pub forward_passes: usize,
}

/// Token ranges that may appear at position `t` of a `task` sequence:
/// depth positions take depth codes; instance records follow the
/// coordinate/class/mask layout, with EOS allowed only between records.
pub fn constrain(vocab: &Vocabulary, task: Task, t: usize, max_instances: usize) -> Vec<Range<usize>> {
    match task {
        Task::Dep => vec![vocab.range(Section::Depth)],
        Task::Ins => match t % RECORD_LEN {
            0 if t / RECORD_LEN >= max_instances => vec![EOS..EOS + 1],
            0 => vec![EOS..EOS + 1, vocab.range(Section::Coord)],
            1..=3 => vec![vocab.range(Section::Coord)],
            4 => vec![vocab.range(Section::Class)],
            _ => vec![vocab.range(Section::Mask)],
        },
    }
}

/// Temperature softmax over the allowed ranges, zero elsewhere.
fn step_distribution<T: Float>(logits: &[T], allowed: &[Range<usize>], temperature: f64) -> Vec<f64> {
    let max = allowed.iter().flat_map(|r| r.clone()).map(|i| logits[i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let mut p = vec![0.0f64; logits.len()];
    let mut z = 0.0;
    for i in allowed.iter().flat_map(|r| r.clone()) {
        p[i] = ((logits[i].as_f64() - max) / temperature).exp();
        z += p[i];
    }
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Lowest-index maximum over the allowed ranges.
fn argmax_allowed<T: Float>(logits: &[T], allowed: &[Range<usize>]) -> usize {
    let mut best = None::<(usize, f64)>;
    for r in allowed {
        for i in r.clone() {
            let v = logits[i].as_f64();
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
    }
    best.map(|b| b.0).unwrap_or(0)
}

/// `Σ_v p_v · table[v]`, skipping zero weights so that one-hot rows copy
/// the table row exactly.
fn mix_rows<T: Float>(p: &[f64], table: &Tensor<T>, out: &mut Vec<T>) {
    let e = table.shape()[1];
    let start = out.len();
    out.resize(start + e, T::zero());
    for (v, &w) in p.iter().enumerate() {
        if w != 0.0 {
            let w = T::of_f64(w);
            for (o, &x) in out[start..].iter_mut().zip(table.row(v)) {
                *o += w * x;
            }
        }
    }
}

fn memory_rows<T: Float>(memory: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    let s = memory.shape();
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        data.extend_from_slice(&memory.data()[r * per..(r + 1) * per]);
    }
    Tensor::new(vec![rows.len(), s[1], s[2]], data)
}

/// Greedy decoding for a batch of encoded images `memory [N,L,E]`. Each
/// step re-runs the causal decoder over the prefix; depth stops after the
/// fixed grid length, instances at EOS.
pub fn decode_autoregressive<T: Float>(
    model: &SolverModel<T>,
    memory: &Tensor<T>,
    task: Task,
    options: &DecodeOptions,
) -> Result<DecodeOutput> {
    options.validate()?;
    if memory.ndim() != 3 || memory.shape()[2] != model.config.embed_dim {
        return Err(Error::shape("decode", format!("memory {:?}", memory.shape())));
    }
    let n = memory.shape()[0];
    let e = model.config.embed_dim;
    let vocab = model.config.vocab;
    let table = &model.params.get(model.layers.tok_emb).value;
    let fixed = match task {
        Task::Dep => Some(model.config.depth_len()),
        Task::Ins => None,
    };

    let mut inputs: Vec<Vec<T>> = (0..n).map(|_| table.row(task.start_token()).to_vec()).collect();
    let mut ids: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut probs: Vec<Vec<Vec<f32>>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut truncated = vec![false; n];
    let mut passes = 0;

    for t in 0.. {
        let active: Vec<usize> = (0..n).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        if t >= model.config.max_seq_len {
            active.iter().for_each(|&i| truncated[i] = true);
            break;
        }
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false);
        let mem = g.constant(memory_rows(memory, &active)?);
        let mut x = Vec::with_capacity(active.len() * (t + 1) * e);
        for &i in &active {
            x.extend_from_slice(&inputs[i]);
        }
        let x = g.constant(Tensor::new(vec![active.len(), t + 1, e], x)?);
        let h = model.decode_embedded(&mut g, &p, x, mem)?;
        let h = g.reshape(h, vec![active.len() * (t + 1), e])?;
        let last: Vec<usize> = (0..active.len()).map(|a| a * (t + 1) + t).collect();
        let h = g.gather(h, &last)?;
        let logits = model.head(&mut g, &p, h)?;
        passes += 1;

        let lv = g.value(logits);
        let allowed = constrain(&vocab, task, t, options.max_instances);
        for (a, &i) in active.iter().enumerate() {
            let row = lv.row(a);
            let dist = step_distribution(row, &allowed, options.temperature);
            let tok = argmax_allowed(row, &allowed);
            ids[i].push(tok);
            probs[i].push(dist.iter().map(|&v| v as f32).collect());
            match options.mode {
                DecodeMode::Hard => inputs[i].extend_from_slice(table.row(tok)),
                DecodeMode::Soft => mix_rows(&dist, table, &mut inputs[i]),
            }
            if fixed == Some(t + 1) || (task == Task::Ins && tok == EOS) {
                done[i] = true;
            }
        }
    }

    let sequences = ids
        .into_iter()
        .zip(probs)
        .map(|(ids, probs)| {
            let len = ids.len();
            let mut s = TokenSequence::new(task, ids, vec![true; len])?;
            s.probs = Some(probs);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodeOutput { sequences, truncated, forward_passes: passes })
}

/// Depth tokens for every grid position from a single decoder pass.
pub fn decode_parallel_depth<T: Float>(model: &SolverModel<T>, memory: &Tensor<T>) -> Result<DecodeOutput> {
    let n = memory.shape()[0];
    let q = model.config.depth_len();
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false);
    let mem = g.constant(memory.clone());
    let logits = model.parallel_depth_logits(&mut g, &p, mem)?;
    let lv = g.value(logits);
    let allowed = constrain(&model.config.vocab, Task::Dep, 0, 0);
    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let mut ids = Vec::with_capacity(q);
        let mut probs = Vec::with_capacity(q);
        for j in 0..q {
            let row = lv.row(i * q + j);
            let dist = step_distribution(row, &allowed, 1.0);
            ids.push(argmax_allowed(row, &allowed));
            probs.push(dist.iter().map(|&v| v as f32).collect());
        }
        let mut s = TokenSequence::new(Task::Dep, ids, vec![true; q])?;
        s.probs = Some(probs);
        sequences.push(s);
    }
    Ok(DecodeOutput { sequences, truncated: vec![false; n], forward_passes: 1 })
}
