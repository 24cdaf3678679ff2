//! The task solver: a conv patch stem and transformer encoder over the
//! image, and a transformer decoder that predicts output tokens either
//! autoregressively or, for depth, all at once from learned queries.

mod decode;
mod train;

pub use decode::{constrain, decode_autoregressive, decode_parallel_depth, DecodeMode, DecodeOptions, DecodeOutput};
pub use train::{
    aux_loss, evaluate_depth, evaluate_instances, infer, solver_loss, train_solver, DepthEval, DepthTarget, LossConfig,
    SolverDataset, SolverEpoch, SolverSample, SolverState, StepLoss, TaskOutput, TaskWeights, Tokenizers,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Linear, Norm};
use crate::seq::{TokenSequence, Vocabulary, PAD};
use crate::tensor::io::Archive;
use crate::tensor::{Float, Graph, ParamId, ParamStore, ParamVars, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Side of the square patches cut by the stem.
    pub patch: usize,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    /// Token grid of the depth task; sizes the parallel-decoding queries.
    pub depth_grid: [usize; 2],
    pub vocab: Vocabulary,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            image_size: 64,
            in_channels: 3,
            patch: 8,
            embed_dim: 64,
            n_heads: 4,
            n_encoder_blocks: 6,
            n_decoder_blocks: 6,
            ffn_mult: 4,
            max_seq_len: 96,
            depth_grid: [4, 4],
            vocab: Vocabulary::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("embed_dim {} must be a positive multiple of n_heads {}", self.embed_dim, self.n_heads)));
        }
        if self.patch == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::Config(format!("image_size {} is not divisible by patch {}", self.image_size, self.patch)));
        }
        if self.max_seq_len == 0 || self.depth_grid[0] * self.depth_grid[1] == 0 {
            return Err(Error::Config("max_seq_len and depth_grid must be positive".into()));
        }
        if self.depth_grid[0] * self.depth_grid[1] > self.max_seq_len {
            return Err(Error::Config("depth sequences exceed max_seq_len".into()));
        }
        Ok(())
    }

    pub fn memory_len(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    pub fn depth_len(&self) -> usize {
        self.depth_grid[0] * self.depth_grid[1]
    }
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl Attention {
    fn new<T: Float>(ps: &mut ParamStore<T>, name: &str, e: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut lin = |s: &str| Linear::new(ps, &format!("{name}.{s}"), e, e, true, rng);
        Attention { q: lin("q"), k: lin("k"), v: lin("v"), o: lin("o"), heads }
    }

    fn split<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let t = g.reshape(x, vec![s[0], s[1], self.heads, s[2] / self.heads])?;
        g.permute(t, &[0, 2, 1, 3])
    }

    /// `x [N,Tq,E]` attends over `ctx [N,Tk,E]`.
    fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var, ctx: Var, causal: bool) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, ctx)?;
        let v = self.v.forward(g, p, ctx)?;
        let (q, k, v) = (self.split(g, q)?, self.split(g, k)?, self.split(g, v)?);
        let a = g.attention(q, k, v, causal)?;
        let a = g.permute(a, &[0, 2, 1, 3])?;
        let a = g.reshape(a, s)?;
        self.o.forward(g, p, a)
    }
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<T: Float>(ps: &mut ParamStore<T>, name: &str, e: usize, mult: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            up: Linear::new(ps, &format!("{name}.up"), e, e * mult, true, rng),
            down: Linear::new(ps, &format!("{name}.down"), e * mult, e, true, rng),
        }
    }

    fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.up.forward(g, p, x)?;
        let h = g.relu(h);
        self.down.forward(g, p, h)
    }
}

/// Pre-norm block: `x + attn(norm(x))`, `x + ffn(norm(x))`.
#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    n1: Norm,
    attn: Attention,
    n2: Norm,
    ffn: FeedForward,
}

/// Pre-norm block with self-attention, cross-attention and FFN.
#[derive(Debug, Clone, Copy)]
struct DecoderBlock {
    n1: Norm,
    self_attn: Attention,
    n2: Norm,
    cross: Attention,
    n3: Norm,
    ffn: FeedForward,
}

fn residual<T: Float>(g: &mut Graph<T>, x: Var, f: impl FnOnce(&mut Graph<T>, Var) -> Result<Var>) -> Result<Var> {
    let h = f(g, x)?;
    g.add(x, h)
}

impl EncoderBlock {
    fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let x = residual(g, x, |g, x| {
            let h = self.n1.forward(g, p, x)?;
            self.attn.forward(g, p, h, h, false)
        })?;
        residual(g, x, |g, x| {
            let h = self.n2.forward(g, p, x)?;
            self.ffn.forward(g, p, h)
        })
    }
}

impl DecoderBlock {
    fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let x = residual(g, x, |g, x| {
            let h = self.n1.forward(g, p, x)?;
            self.self_attn.forward(g, p, h, h, causal)
        })?;
        let x = residual(g, x, |g, x| {
            let h = self.n2.forward(g, p, x)?;
            self.cross.forward(g, p, h, memory, false)
        })?;
        residual(g, x, |g, x| {
            let h = self.n3.forward(g, p, x)?;
            self.ffn.forward(g, p, h)
        })
    }
}

#[derive(Debug, Clone)]
struct Layers {
    stem: Conv,
    enc_pos: ParamId,
    enc: Vec<EncoderBlock>,
    enc_norm: Norm,
    tok_emb: ParamId,
    dec_pos: ParamId,
    queries: ParamId,
    dec: Vec<DecoderBlock>,
    dec_norm: Norm,
    head: Linear,
}

#[derive(Debug, Clone)]
pub struct SolverModel<T> {
    pub config: SolverConfig,
    pub params: ParamStore<T>,
    layers: Layers,
}

/// Teacher-forced logits and their flattened targets.
pub struct TeacherForced {
    /// `[N·T, V]`.
    pub logits: Var,
    pub targets: Vec<usize>,
    pub ignore: Vec<bool>,
    pub len: usize,
}

impl<T: Float> SolverModel<T> {
    pub fn build(config: SolverConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let e = config.embed_dim;
        let emb_std = (1.0 / e as f64).sqrt();
        let stem = Conv::new(&mut ps, "enc.stem", config.in_channels, e, config.patch, config.patch, 0, true, &mut rng);
        let enc_pos = ps.add("enc.pos", Tensor::randn(vec![config.memory_len(), e], emb_std, &mut rng));
        let enc = (0..config.n_encoder_blocks)
            .map(|i| EncoderBlock {
                n1: Norm::layer(&mut ps, &format!("enc.b{i}.n1"), e),
                attn: Attention::new(&mut ps, &format!("enc.b{i}.attn"), e, config.n_heads, &mut rng),
                n2: Norm::layer(&mut ps, &format!("enc.b{i}.n2"), e),
                ffn: FeedForward::new(&mut ps, &format!("enc.b{i}.ffn"), e, config.ffn_mult, &mut rng),
            })
            .collect();
        let enc_norm = Norm::layer(&mut ps, "enc.norm", e);
        let v = config.vocab.size();
        let tok_emb = ps.add("dec.tok", Tensor::randn(vec![v, e], emb_std, &mut rng));
        let dec_pos = ps.add("dec.pos", Tensor::randn(vec![config.max_seq_len, e], emb_std, &mut rng));
        let queries = ps.add("dec.queries", Tensor::randn(vec![config.depth_len(), e], emb_std, &mut rng));
        let dec = (0..config.n_decoder_blocks)
            .map(|i| DecoderBlock {
                n1: Norm::layer(&mut ps, &format!("dec.b{i}.n1"), e),
                self_attn: Attention::new(&mut ps, &format!("dec.b{i}.self"), e, config.n_heads, &mut rng),
                n2: Norm::layer(&mut ps, &format!("dec.b{i}.n2"), e),
                cross: Attention::new(&mut ps, &format!("dec.b{i}.cross"), e, config.n_heads, &mut rng),
                n3: Norm::layer(&mut ps, &format!("dec.b{i}.n3"), e),
                ffn: FeedForward::new(&mut ps, &format!("dec.b{i}.ffn"), e, config.ffn_mult, &mut rng),
            })
            .collect();
        let dec_norm = Norm::layer(&mut ps, "dec.norm", e);
        let head = Linear::new(&mut ps, "dec.head", e, v, true, &mut rng);
        Ok(SolverModel {
            config,
            params: ps,
            layers: Layers { stem, enc_pos, enc, enc_norm, tok_emb, dec_pos, queries, dec, dec_norm, head },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    pub fn cast<U: Float>(&self) -> SolverModel<U> {
        SolverModel { config: self.config.clone(), params: self.params.cast(), layers: self.layers.clone() }
    }

    /// `[N,C,H,W]` images → memory `[N, (H/p)(W/p), E]`.
    pub fn encode_image(&self, g: &mut Graph<T>, p: &ParamVars, images: Var) -> Result<Var> {
        let s = g.shape(images).to_vec();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(Error::shape(
                "encode_image",
                format!("images {s:?}, expected [N, {}, {}, {}]", c.in_channels, c.image_size, c.image_size),
            ));
        }
        let x = self.layers.stem.forward(g, p, images)?;
        let l = c.memory_len();
        let x = g.reshape(x, vec![s[0], c.embed_dim, l])?;
        let x = g.permute(x, &[0, 2, 1])?;
        let mut x = g.add(x, p[self.layers.enc_pos])?;
        for b in &self.layers.enc {
            x = b.forward(g, p, x)?;
        }
        self.layers.enc_norm.forward(g, p, x)
    }

    /// Adds positional embeddings to decoder inputs `[N,T,E]`.
    fn with_positions(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let t = g.shape(x)[1];
        if t > self.config.max_seq_len {
            return Err(Error::shape("decoder", format!("{t} positions exceed max_seq_len {}", self.config.max_seq_len)));
        }
        let rows: Vec<usize> = (0..t).collect();
        let pos = g.gather(p[self.layers.dec_pos], &rows)?;
        g.add(x, pos)
    }

    /// Decoder over input embeddings `[N,T,E]` (positions not yet added),
    /// returning normalized hidden states.
    fn decoder(&self, g: &mut Graph<T>, p: &ParamVars, x: Var, memory: Var, causal: bool) -> Result<Var> {
        let mut x = x;
        for b in &self.layers.dec {
            x = b.forward(g, p, x, memory, causal)?;
        }
        self.layers.dec_norm.forward(g, p, x)
    }

    /// Output-vocabulary logits for hidden rows `[.., E]`.
    pub fn head(&self, g: &mut Graph<T>, p: &ParamVars, h: Var) -> Result<Var> {
        self.layers.head.forward(g, p, h)
    }

    /// Causal decoder over token-embedding inputs `[N,T,E]`.
    pub fn decode_embedded(&self, g: &mut Graph<T>, p: &ParamVars, inputs: Var, memory: Var) -> Result<Var> {
        let x = self.with_positions(g, p, inputs)?;
        self.decoder(g, p, x, memory, true)
    }

    pub fn token_table<'a>(&self, p: &ParamVars, g: &'a Graph<T>) -> &'a Tensor<T> {
        g.value(p[self.layers.tok_emb])
    }

    /// Teacher forcing: the decoder reads `[task, y_0, …, y_{T-2}]` and is
    /// scored on `y`. Shorter sequences are padded; padding and positions
    /// with a false loss mask are ignored.
    pub fn teacher_forced(&self, g: &mut Graph<T>, p: &ParamVars, memory: Var, seqs: &[&TokenSequence]) -> Result<TeacherForced> {
        let n = seqs.len();
        if g.shape(memory)[0] != n {
            return Err(Error::shape("teacher_forced", format!("{n} sequences for memory {:?}", g.shape(memory))));
        }
        let vocab = self.config.vocab.size();
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut inputs = Vec::with_capacity(n * len);
        let mut targets = Vec::with_capacity(n * len);
        let mut ignore = Vec::with_capacity(n * len);
        for s in seqs {
            s.check(&self.config.vocab)?;
            inputs.push(s.task.start_token());
            for t in 0..len {
                if t + 1 < len {
                    inputs.push(s.ids.get(t).copied().unwrap_or(PAD));
                }
                match s.ids.get(t) {
                    Some(&id) => {
                        targets.push(id);
                        ignore.push(!s.loss_mask[t]);
                    }
                    None => {
                        targets.push(PAD);
                        ignore.push(true);
                    }
                }
            }
        }
        let e = g.embedding(p[self.layers.tok_emb], &inputs)?;
        let e = g.reshape(e, vec![n, len, self.config.embed_dim])?;
        let h = self.decode_embedded(g, p, e, memory)?;
        let logits = self.head(g, p, h)?;
        let logits = g.reshape(logits, vec![n * len, vocab])?;
        Ok(TeacherForced { logits, targets, ignore, len })
    }

    /// Depth logits `[N·Q, V]` for all grid positions in one pass: learned
    /// queries, no causal mask.
    pub fn parallel_depth_logits(&self, g: &mut Graph<T>, p: &ParamVars, memory: Var) -> Result<Var> {
        let n = g.shape(memory)[0];
        let q = self.config.depth_len();
        let e = self.config.embed_dim;
        let zeros = g.constant(Tensor::zeros(vec![n, q, e]));
        let x = g.add(zeros, p[self.layers.queries])?;
        let h = self.decoder(g, p, x, memory, false)?;
        let logits = self.head(g, p, h)?;
        g.reshape(logits, vec![n * q, self.config.vocab.size()])
    }

    pub fn to_archive(&self, manifest: serde_json::Value, optimizer: bool) -> Result<Archive<T>> {
        let mut m = if manifest.is_object() { manifest } else { serde_json::json!({}) };
        m["kind"] = "solver".into();
        m["solver_config"] = serde_json::to_value(&self.config)?;
        m["vocabulary"] = serde_json::to_value(self.config.vocab)?;
        let mut a = Archive::new(m);
        a.push_params(&self.params, optimizer);
        Ok(a)
    }

    pub fn from_archive(a: &Archive<T>) -> Result<Self> {
        if a.manifest.get("kind").and_then(|v| v.as_str()) != Some("solver") {
            return Err(Error::Format("archive is not a solver checkpoint".into()));
        }
        let cfg: SolverConfig = serde_json::from_value(
            a.manifest.get("solver_config").cloned().ok_or_else(|| Error::Format("missing solver_config".into()))?,
        )?;
        let mut model = Self::build(cfg, 0)?;
        a.restore_params(&mut model.params)?;
        Ok(model)
    }
}
