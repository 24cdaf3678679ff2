//! Convolutional VQ-VAEs that turn depth maps and instance masks into short
//! grids of codebook tokens, and back.

mod augment;
mod interp;
mod train;

pub use augment::{mask_augment, MaskAugSpec};
pub use interp::{InterpMode, InterpolationTokenizer};
pub use train::{reconstruction_iou, reconstruction_rmse, train_tokenizer, EpochMetrics, TokenizerDataset, TrainState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, ResBlock};
use crate::scene::MASK_SIDE;
use crate::tensor::io::Archive;
use crate::tensor::{Float, Graph, ParamStore, ParamVars, Tensor, Var};
use crate::vq::{commitment_loss, embed_soft, Codebook, DeadCodePolicy};

/// Which task output a tokenizer reconstructs; selects the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Depth,
    Mask,
}

const BASE_CHANNELS: [usize; 7] = [16, 32, 64, 128, 256, 256, 256];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub task: OutputKind,
    pub n_conv_layers: usize,
    pub n_resblocks: usize,
    pub channels: Vec<usize>,
    pub downsample_ratio: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub width_multiplier: f64,
    pub input_range: [f32; 2],
    pub use_bias: bool,
    pub norm_groups: usize,
    pub beta: f64,
    pub ema_decay: f64,
    pub ema_epsilon: f64,
    pub dead_code: DeadCodePolicy,
    /// Seed the codebook from encoder outputs of the first batch.
    pub init_codebook_from_data: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::depth()
    }
}

impl TokenizerConfig {
    /// Five stride-2 layers (32× downsampling), 16→256 channels.
    pub fn depth() -> Self {
        TokenizerConfig {
            task: OutputKind::Depth,
            n_conv_layers: 5,
            n_resblocks: 2,
            channels: BASE_CHANNELS[..5].to_vec(),
            downsample_ratio: 32,
            codebook_size: 128,
            code_dim: 64,
            width_multiplier: 1.0,
            input_range: [0.0, 1.0],
            use_bias: true,
            norm_groups: 8,
            beta: 0.25,
            ema_decay: 0.99,
            ema_epsilon: 1e-5,
            dead_code: DeadCodePolicy::None,
            init_codebook_from_data: true,
        }
    }

    /// Four layers: a 64×64 crop becomes a 4×4 grid.
    pub fn mask() -> Self {
        TokenizerConfig { task: OutputKind::Mask, ..Self::depth() }.with_ratio(16)
    }

    /// Sets the number of stride-2 layers to `log2(ratio)` and takes the
    /// matching prefix of the default channel schedule.
    pub fn with_ratio(mut self, ratio: usize) -> Self {
        let n = ratio.max(1).trailing_zeros() as usize;
        self.n_conv_layers = n;
        self.downsample_ratio = ratio;
        self.channels = BASE_CHANNELS[..n.min(BASE_CHANNELS.len())].to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_conv_layers == 0 {
            return bad("at least one conv layer is required".into());
        }
        if self.channels.len() != self.n_conv_layers {
            return bad(format!(
                "channel schedule has {} entries for {} conv layers",
                self.channels.len(),
                self.n_conv_layers
            ));
        }
        if self.downsample_ratio != 1 << self.n_conv_layers {
            return bad(format!(
                "downsample_ratio {} != 2^{}",
                self.downsample_ratio, self.n_conv_layers
            ));
        }
        if self.codebook_size < 2 || self.code_dim == 0 {
            return bad("codebook_size must be >= 2 and code_dim >= 1".into());
        }
        if self.width_multiplier <= 0.0 || self.norm_groups == 0 || self.beta < 0.0 {
            return bad("width_multiplier, norm_groups must be positive and beta nonnegative".into());
        }
        if self.input_range[0] >= self.input_range[1] {
            return bad(format!("input range {:?} is empty", self.input_range));
        }
        Ok(())
    }

    /// Channel schedule after the width multiplier.
    pub fn scaled_channels(&self) -> Vec<usize> {
        self.channels
            .iter()
            .map(|&c| ((c as f64 * self.width_multiplier).round() as usize).max(1))
            .collect()
    }
}

/// A 2D grid of codebook indices in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Layers {
    enc: Vec<Conv>,
    enc_res: Vec<ResBlock>,
    pre: Conv,
    post: Conv,
    dec_res: Vec<ResBlock>,
    dec: Vec<Conv>,
}

/// Encoder, codebook and decoder of one VQ-VAE.
#[derive(Debug, Clone)]
pub struct TokenizerModel<T> {
    pub config: TokenizerConfig,
    pub params: ParamStore<T>,
    pub codebook: Codebook<T>,
    layers: Layers,
}

/// Values produced by one training forward pass.
pub struct TrainForward<T> {
    pub loss: Var,
    pub recon: Var,
    pub output: Var,
    pub indices: Vec<usize>,
    pub latents: Tensor<T>,
}

impl<T: Float> TokenizerModel<T> {
    pub fn build(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let ch = config.scaled_channels();
        let (bias, groups) = (config.use_bias, config.norm_groups);
        let last = *ch.last().unwrap();

        let mut enc = Vec::new();
        let mut c_in = 1;
        for (i, &c) in ch.iter().enumerate() {
            enc.push(Conv::new(&mut ps, &format!("enc.conv{i}"), c_in, c, 3, 2, 1, bias, &mut rng));
            c_in = c;
        }
        let enc_res = (0..config.n_resblocks)
            .map(|j| ResBlock::new(&mut ps, &format!("enc.res{j}"), last, groups, bias, &mut rng))
            .collect();
        let pre = Conv::new(&mut ps, "enc.pre", last, config.code_dim, 1, 1, 0, bias, &mut rng);
        let post = Conv::new(&mut ps, "dec.post", config.code_dim, last, 1, 1, 0, bias, &mut rng);
        let dec_res = (0..config.n_resblocks)
            .map(|j| ResBlock::new(&mut ps, &format!("dec.res{j}"), last, groups, bias, &mut rng))
            .collect();
        let mut dec = Vec::new();
        for i in (0..ch.len()).rev() {
            let c_out = if i == 0 { 1 } else { ch[i - 1] };
            dec.push(Conv::transposed(&mut ps, &format!("dec.deconv{i}"), ch[i], c_out, 4, 2, 1, bias, &mut rng));
        }
        let codebook = Codebook::new(config.codebook_size, config.code_dim, config.ema_decay, config.ema_epsilon, &mut rng)?;
        Ok(TokenizerModel {
            config,
            params: ps,
            codebook,
            layers: Layers { enc, enc_res, pre, post, dec_res, dec },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn ratio(&self) -> usize {
        self.config.downsample_ratio
    }

    pub fn grid_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let r = self.ratio();
        if h == 0 || w == 0 || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            return Err(Error::shape("tokenize", format!("{h}x{w} is not divisible by the downsample ratio {r}")));
        }
        Ok((h / r, w / r))
    }

    pub fn cast<U: Float>(&self) -> TokenizerModel<U> {
        let mut params = self.params.cast();
        for (dst, src) in params.iter_mut().zip(self.params.iter()) {
            dst.trainable = src.trainable;
        }
        TokenizerModel {
            config: self.config.clone(),
            params,
            codebook: self.codebook.cast(),
            layers: self.layers.clone(),
        }
    }

    /// `[N,1,H,W] → [N,D,h,w]` pre-quantization latents. Inputs are first
    /// mapped affinely from `input_range` to `[-1, 1]`.
    pub fn encode(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let [lo, hi] = self.config.input_range;
        let mid = g.constant(Tensor::scalar(T::of_f64(-(lo as f64 + hi as f64) / 2.0)));
        let mut h = g.add(x, mid)?;
        h = g.scale(h, T::of_f64(2.0 / (hi as f64 - lo as f64)));
        for conv in &self.layers.enc {
            h = conv.forward(g, p, h)?;
            h = g.relu(h);
        }
        for rb in &self.layers.enc_res {
            h = rb.forward(g, p, h)?;
        }
        self.layers.pre.forward(g, p, h)
    }

    /// `[N,D,h,w] → [N·h·w, D]`, one row per token position.
    pub fn latent_rows(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        let t = g.permute(z, &[0, 2, 3, 1])?;
        g.reshape(t, vec![s[0] * s[2] * s[3], s[1]])
    }

    /// Token-position embeddings `[N·h·w, D]` → output logits `[N,1,H,W]`.
    pub fn decode_rows(&self, g: &mut Graph<T>, p: &ParamVars, rows: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let d = self.config.code_dim;
        if g.shape(rows) != [n * h * w, d] {
            return Err(Error::shape("detokenize", format!("rows {:?} vs grid {n}x{h}x{w} of dim {d}", g.shape(rows))));
        }
        let t = g.reshape(rows, vec![n, h, w, d])?;
        let mut x = g.permute(t, &[0, 3, 1, 2])?;
        x = self.layers.post.forward(g, p, x)?;
        for rb in &self.layers.dec_res {
            x = rb.forward(g, p, x)?;
        }
        let last = self.layers.dec.len() - 1;
        for (i, conv) in self.layers.dec.iter().enumerate() {
            x = conv.forward(g, p, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Soft-token path on the tape: `probs [N·h·w, K]` through the codebook
    /// and decoder, returning logits. Gradients reach `probs`.
    pub fn decode_soft_on(&self, g: &mut Graph<T>, p: &ParamVars, probs: Var, n: usize, h: usize, w: usize) -> Result<Var> {
        let table = g.constant(self.codebook.embeddings.clone());
        let rows = embed_soft(g, probs, table)?;
        self.decode_rows(g, p, rows, n, h, w)
    }

    /// Reconstruction loss on logits: masked MSE after the sigmoid for depth,
    /// masked BCE for masks.
    pub fn reconstruction_loss(&self, g: &mut Graph<T>, logits: Var, target: &[T], valid: &[bool]) -> Result<Var> {
        match self.config.task {
            OutputKind::Depth => {
                let y = g.sigmoid(logits);
                g.masked_mse(y, target, valid)
            }
            OutputKind::Mask => g.masked_bce_with_logits(logits, target, valid),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape("tokenize", format!("input {s:?} must be [N, 1, H, W]")));
        }
        self.grid_dims(s[2], s[3])?;
        let [lo, hi] = self.config.input_range;
        let tol = 1e-4;
        if let Some(v) = x.data().iter().find(|v| {
            let v = v.as_f64();
            !(v >= lo as f64 - tol && v <= hi as f64 + tol)
        }) {
            return Err(Error::Contract(format!("input value {v} outside {:?}", self.config.input_range)));
        }
        Ok((s[0], s[2], s[3]))
    }

    /// Encoder + quantizer (+ decoder) with loss. With `bypass_quantizer`
    /// the latents go straight to the decoder; the commitment term is then
    /// zero. That surrogate is what gradient checks compare against.
    pub fn forward_train(
        &self,
        g: &mut Graph<T>,
        p: &ParamVars,
        input: &Tensor<T>,
        target: &[T],
        valid: &[bool],
        bypass_quantizer: bool,
    ) -> Result<TrainForward<T>> {
        let (n, hh, ww) = self.check_input(input)?;
        let (h, w) = self.grid_dims(hh, ww)?;
        let x = g.constant(input.clone());
        let z = self.encode(g, p, x)?;
        let rows = self.latent_rows(g, z)?;
        let latents = g.value(rows).clone();
        let (indices, dec_in, commit) = if bypass_quantizer {
            (Vec::new(), rows, None)
        } else {
            let (indices, zq) = self.codebook.quantize_hard(&latents)?;
            let zq = g.constant(zq);
            let st = g.straight_through(rows, zq)?;
            let c = commitment_loss(g, rows, zq, self.config.beta)?;
            (indices, st, Some(c))
        };
        let output = self.decode_rows(g, p, dec_in, n, h, w)?;
        let recon = self.reconstruction_loss(g, output, target, valid)?;
        let loss = match commit {
            Some(c) => g.add(recon, c)?,
            None => recon,
        };
        Ok(TrainForward { loss, recon, output, indices, latents })
    }

    /// Token grids for a batch `[N,1,H,W]`.
    pub fn tokenize(&self, input: &Tensor<T>) -> Result<Vec<TokenGrid>> {
        let (n, hh, ww) = self.check_input(input)?;
        let (h, w) = self.grid_dims(hh, ww)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(input.clone());
        let z = self.encode(&mut g, &p, x)?;
        let rows = self.latent_rows(&mut g, z)?;
        let (indices, _) = self.codebook.quantize_hard(g.value(rows))?;
        Ok(indices.chunks(h * w).take(n).map(|c| TokenGrid { h, w, ids: c.to_vec() }).collect())
    }

    /// Hard detokenization, implemented as the soft path on one-hot rows.
    pub fn detokenize(&self, grids: &[TokenGrid]) -> Result<Tensor<T>> {
        let Some(first) = grids.first() else {
            return Err(Error::Contract("detokenize needs at least one grid".into()));
        };
        let (h, w) = (first.h, first.w);
        let k = self.codebook.size();
        let mut probs = vec![T::zero(); grids.len() * h * w * k];
        for (gi, grid) in grids.iter().enumerate() {
            if (grid.h, grid.w) != (h, w) || grid.ids.len() != h * w {
                return Err(Error::shape("detokenize", format!("grid {}x{} with {} ids", grid.h, grid.w, grid.ids.len())));
            }
            for (pos, &id) in grid.ids.iter().enumerate() {
                if id >= k {
                    return Err(Error::Index { op: "detokenize", index: id, limit: k });
                }
                probs[(gi * h * w + pos) * k + id] = T::one();
            }
        }
        self.detokenize_soft(&Tensor::new(vec![grids.len() * h * w, k], probs)?, grids.len(), h, w)
    }

    /// Soft detokenization from per-position distributions over the codebook.
    pub fn detokenize_soft(&self, probs: &Tensor<T>, n: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let k = self.codebook.size();
        if probs.shape() != [n * h * w, k] {
            return Err(Error::shape("detokenize", format!("probs {:?} vs {n}x{h}x{w} over {k} codes", probs.shape())));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let pv = g.constant(probs.clone());
        let logits = self.decode_soft_on(&mut g, &p, pv, n, h, w)?;
        let out = g.sigmoid(logits);
        Ok(g.value(out).clone())
    }

    /// Runs the full autoencoder (tokenize then detokenize).
    pub fn reconstruct(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let grids = self.tokenize(input)?;
        self.detokenize(&grids)
    }

    pub fn to_archive(&self, manifest: serde_json::Value, optimizer: bool) -> Result<Archive<T>> {
        let mut m = manifest;
        if !m.is_object() {
            m = serde_json::json!({});
        }
        m["kind"] = "tokenizer".into();
        m["tokenizer_config"] = serde_json::to_value(&self.config)?;
        let mut a = Archive::new(m);
        a.push_params(&self.params, optimizer);
        self.codebook.save_into(&mut a);
        Ok(a)
    }

    pub fn from_archive(a: &Archive<T>) -> Result<Self> {
        if a.manifest.get("kind").and_then(|v| v.as_str()) != Some("tokenizer") {
            return Err(Error::Format("archive is not a tokenizer checkpoint".into()));
        }
        let cfg: TokenizerConfig = serde_json::from_value(
            a.manifest.get("tokenizer_config").cloned().ok_or_else(|| Error::Format("missing tokenizer_config".into()))?,
        )?;
        let mut model = Self::build(cfg, 0)?;
        a.restore_params(&mut model.params)?;
        model.codebook = Codebook::load_from(a, model.config.ema_decay, model.config.ema_epsilon)?;
        if model.codebook.size() != model.config.codebook_size || model.codebook.dim() != model.config.code_dim {
            return Err(Error::Format("codebook shape disagrees with the config".into()));
        }
        Ok(model)
    }
}

/// Anything that can turn a 64×64 instance crop into a small token grid
/// and back.
pub trait MaskCodec {
    fn grid(&self) -> (usize, usize);
    fn codebook_size(&self) -> usize;
    fn encode_masks(&self, masks: &[&[bool]]) -> Result<Vec<Vec<usize>>>;
    /// Each entry holds `h·w` rows of `K` probabilities.
    fn decode_masks_soft(&self, probs: &[Vec<f32>]) -> Result<Vec<Vec<bool>>>;

    fn decode_masks(&self, tokens: &[Vec<usize>]) -> Result<Vec<Vec<bool>>> {
        let k = self.codebook_size();
        let probs = tokens
            .iter()
            .map(|t| {
                let mut p = vec![0.0f32; t.len() * k];
                for (i, &id) in t.iter().enumerate() {
                    if id >= k {
                        return Err(Error::Index { op: "decode_masks", index: id, limit: k });
                    }
                    p[i * k + id] = 1.0;
                }
                Ok(p)
            })
            .collect::<Result<Vec<_>>>()?;
        self.decode_masks_soft(&probs)
    }
}

pub fn masks_to_tensor<T: Float>(masks: &[&[bool]]) -> Result<Tensor<T>> {
    let side = MASK_SIDE;
    let mut data = Vec::with_capacity(masks.len() * side * side);
    for m in masks {
        if m.len() != side * side {
            return Err(Error::shape("mask", format!("{} pixels, expected {}", m.len(), side * side)));
        }
        data.extend(m.iter().map(|&b| if b { T::one() } else { T::zero() }));
    }
    Tensor::new(vec![masks.len(), 1, side, side], data)
}

/// Batch size for eager tokenizer inference.
const INFER_CHUNK: usize = 64;

impl MaskCodec for TokenizerModel<f32> {
    fn grid(&self) -> (usize, usize) {
        let s = MASK_SIDE / self.ratio();
        (s, s)
    }

    fn codebook_size(&self) -> usize {
        self.codebook.size()
    }

    fn encode_masks(&self, masks: &[&[bool]]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(masks.len());
        for chunk in masks.chunks(INFER_CHUNK) {
            let x = masks_to_tensor(chunk)?;
            out.extend(self.tokenize(&x)?.into_iter().map(|g| g.ids));
        }
        Ok(out)
    }

    fn decode_masks_soft(&self, probs: &[Vec<f32>]) -> Result<Vec<Vec<bool>>> {
        let (h, w) = self.grid();
        let k = self.codebook.size();
        let mut out = Vec::with_capacity(probs.len());
        for chunk in probs.chunks(INFER_CHUNK) {
            let mut data = Vec::with_capacity(chunk.len() * h * w * k);
            for p in chunk {
                if p.len() != h * w * k {
                    return Err(Error::shape("decode_masks", format!("{} probabilities for a {h}x{w} grid of {k}", p.len())));
                }
                data.extend_from_slice(p);
            }
            let y = self.detokenize_soft(&Tensor::new(vec![chunk.len() * h * w, k], data)?, chunk.len(), h, w)?;
            let side = MASK_SIDE * MASK_SIDE;
            out.extend(y.data().chunks(side).map(|m| m.iter().map(|&v| v >= 0.5).collect()));
        }
        Ok(out)
    }
}
