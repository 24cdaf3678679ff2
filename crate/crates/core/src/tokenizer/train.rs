use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mask_augment, MaskAugSpec, OutputKind, TokenizerModel};
use crate::error::{Error, Result};
use crate::metrics::iou;
use crate::scene::DepthMap;
use crate::tensor::optim::{adam_step, epoch_rng, TrainConfig};
use crate::tensor::{Graph, Tensor};

/// Same-size single-channel training targets in the tokenizer's input
/// range, with per-pixel validity.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerDataset {
    pub h: usize,
    pub w: usize,
    pub inputs: Vec<Vec<f32>>,
    pub valid: Vec<Vec<bool>>,
}

impl TokenizerDataset {
    /// Normalized depth; invalid pixels are set to 0.
    pub fn from_depth(maps: &[DepthMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Contract("empty dataset".into()))?;
        let (h, w) = (first.h, first.w);
        let mut inputs = Vec::with_capacity(maps.len());
        let mut valid = Vec::with_capacity(maps.len());
        for m in maps {
            if (m.h, m.w) != (h, w) {
                return Err(Error::shape("dataset", format!("{}x{} among {h}x{w} maps", m.h, m.w)));
            }
            let v = m.normalized().into_iter().zip(&m.valid).map(|(x, &ok)| if ok { x } else { 0.0 }).collect();
            inputs.push(v);
            valid.push(m.valid.clone());
        }
        Ok(TokenizerDataset { h, w, inputs, valid })
    }

    pub fn from_masks(masks: &[Vec<bool>], side: usize) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Contract("empty dataset".into()));
        }
        if masks.iter().any(|m| m.len() != side * side) {
            return Err(Error::shape("dataset", format!("masks must be {side}x{side}")));
        }
        Ok(TokenizerDataset {
            h: side,
            w: side,
            inputs: masks.iter().map(|m| m.iter().map(|&b| b as u8 as f32).collect()).collect(),
            valid: vec![vec![true; side * side]; masks.len()],
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn batch_tensor(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let data = idx.iter().flat_map(|&i| self.inputs[i].iter().copied()).collect();
        Tensor::new(vec![idx.len(), 1, self.h, self.w], data)
    }
}

/// Resumable position in a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub codebook_initialized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    /// Depth: RMSE in normalized units. Masks: mean IoU.
    pub recon_metric: f64,
    pub lr: f64,
}

/// Trains until `cfg.epochs` epochs are complete, starting from `state`.
/// `on_epoch` sees every finished epoch (for logging and checkpoints).
pub fn train_tokenizer(
    model: &mut TokenizerModel<f32>,
    data: &TokenizerDataset,
    cfg: &TrainConfig,
    aug: Option<&MaskAugSpec>,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochMetrics, &TokenizerModel<f32>, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("empty dataset".into()));
    }
    model.grid_dims(data.h, data.w)?;
    if let Some(a) = aug {
        a.validate(data.h, data.w)?;
    }
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = epoch_rng(cfg.seed, epoch);
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut batches) = (0.0, 0usize);
        let (mut se, mut count, mut iou_sum) = (0.0f64, 0usize, 0.0f64);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut input = Vec::with_capacity(idx.len() * data.h * data.w);
            let mut target = Vec::with_capacity(input.capacity());
            let mut valid = Vec::with_capacity(input.capacity());
            for &i in idx {
                match aug {
                    Some(a) => {
                        let (c, t, m) = mask_augment(&data.inputs[i], &data.valid[i], data.h, data.w, a, &mut rng)?;
                        input.extend(c);
                        target.extend(t);
                        valid.extend(m);
                    }
                    None => {
                        input.extend_from_slice(&data.inputs[i]);
                        target.extend_from_slice(&data.inputs[i]);
                        valid.extend_from_slice(&data.valid[i]);
                    }
                }
            }
            let input = Tensor::new(vec![idx.len(), 1, data.h, data.w], input)?;

            if model.config.init_codebook_from_data && !state.codebook_initialized {
                let mut g = Graph::new();
                let p = model.params.bind(&mut g, false);
                let x = g.constant(input.clone());
                let z = model.encode(&mut g, &p, x)?;
                let rows = model.latent_rows(&mut g, z)?;
                let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                model.codebook.init_from(g.value(rows), &mut init_rng)?;
                state.codebook_initialized = true;
            }

            let mut g = Graph::new();
            let p = model.params.bind(&mut g, true);
            let fwd = model.forward_train(&mut g, &p, &input, &target, &valid, false)?;
            let loss = g.value(fwd.loss).item() as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch: epoch + 1, step, loss });
            }
            let grads = g.backward(fwd.loss)?;
            model.params.clear_grad();
            model.params.accumulate(&p, &grads);
            adam_step(&mut model.params, lr, cfg)?;
            model.codebook.ema_update(&fwd.latents, &fwd.indices)?;
            let policy = model.config.dead_code;
            model.codebook.apply_dead_code_policy(policy, &fwd.latents, &mut rng)?;

            loss_sum += loss;
            batches += 1;
            let out = g.value(fwd.output).data();
            let plane = data.h * data.w;
            match model.config.task {
                OutputKind::Depth => {
                    for i in 0..out.len() {
                        if valid[i] {
                            let y = 1.0 / (1.0 + (-out[i] as f64).exp());
                            se += (y - target[i] as f64).powi(2);
                            count += 1;
                        }
                    }
                }
                OutputKind::Mask => {
                    for (o, t) in out.chunks(plane).zip(target.chunks(plane)) {
                        let pm: Vec<bool> = o.iter().map(|&v| v >= 0.0).collect();
                        let tm: Vec<bool> = t.iter().map(|&v| v >= 0.5).collect();
                        iou_sum += iou(&pm, &tm);
                        count += 1;
                    }
                }
            }
        }
        let recon_metric = match model.config.task {
            OutputKind::Depth => (se / count.max(1) as f64).sqrt(),
            OutputKind::Mask => iou_sum / count.max(1) as f64,
        };
        let m = EpochMetrics { epoch: epoch + 1, loss: loss_sum / batches.max(1) as f64, recon_metric, lr };
        state.epoch += 1;
        on_epoch(&m, model, state)?;
        history.push(m);
    }
    Ok(history)
}

/// Tokenize→detokenize RMSE over valid pixels of a dataset, in the
/// dataset's units. `restrict` optionally limits the pixels scored.
pub fn reconstruction_rmse(
    model: &TokenizerModel<f32>,
    inputs: &TokenizerDataset,
    targets: &[Vec<f32>],
    restrict: Option<&[Vec<bool>]>,
) -> Result<f64> {
    let (mut se, mut n) = (0.0f64, 0usize);
    let idx: Vec<usize> = (0..inputs.len()).collect();
    for chunk in idx.chunks(32) {
        let x = inputs.batch_tensor(chunk)?;
        let y = model.reconstruct(&x)?;
        let plane = inputs.h * inputs.w;
        for (k, &i) in chunk.iter().enumerate() {
            let out = &y.data()[k * plane..(k + 1) * plane];
            for p in 0..plane {
                let scored = match restrict {
                    Some(r) => r[i][p],
                    None => inputs.valid[i][p],
                };
                if scored {
                    se += (out[p] as f64 - targets[i][p] as f64).powi(2);
                    n += 1;
                }
            }
        }
    }
    Ok((se / n.max(1) as f64).sqrt())
}

/// Mean per-sample IoU between binary inputs and their reconstructions
/// thresholded at 0.5.
pub fn reconstruction_iou(model: &TokenizerModel<f32>, inputs: &TokenizerDataset) -> Result<f64> {
    let mut total = 0.0;
    let idx: Vec<usize> = (0..inputs.len()).collect();
    for chunk in idx.chunks(32) {
        let y = model.reconstruct(&inputs.batch_tensor(chunk)?)?;
        let plane = inputs.h * inputs.w;
        for (k, &i) in chunk.iter().enumerate() {
            let pred: Vec<bool> = y.data()[k * plane..(k + 1) * plane].iter().map(|&v| v >= 0.5).collect();
            let gt: Vec<bool> = inputs.inputs[i].iter().map(|&v| v >= 0.5).collect();
            total += iou(&pred, &gt);
        }
    }
    Ok(total / inputs.len().max(1) as f64)
}
