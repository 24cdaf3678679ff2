//! Small layer helpers shared by the tokenizer and the solver. Each layer
//! only holds [`ParamId`]s; values live in the model's [`ParamStore`].

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Float, Graph, ParamId, ParamStore, ParamVars, Tensor, Var};

fn he<T: Float>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::randn(shape, (2.0 / fan_in.max(1) as f64).sqrt(), rng)
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), he(vec![c_out, c_in, k, k], c_in * k * k, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![c_out])));
        Conv { w, b, stride, padding, transposed: false }
    }

    /// Transposed convolution; weight layout `[c_in, c_out, k, k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn transposed<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        // each output pixel sees about c_in·k²/stride² inputs
        let fan_in = c_in * k * k / (stride * stride).max(1);
        let w = store.add(format!("{name}.w"), he(vec![c_in, c_out, k, k], fan_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![c_out])));
        Conv { w, b, stride, padding, transposed: true }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let b = self.b.map(|b| p[b]);
        if self.transposed {
            g.conv_transpose2d(x, p[self.w], b, self.stride, self.padding)
        } else {
            g.conv2d(x, p[self.w], b, self.stride, self.padding)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    /// Group count for group norm; 0 selects layer norm over the last axis.
    pub groups: usize,
}

impl Norm {
    pub fn group<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.add(format!("{name}.g"), Tensor::ones(vec![channels]));
        let beta = store.add(format!("{name}.b"), Tensor::zeros(vec![channels]));
        Norm { gamma, beta, groups: gcd(groups, channels).max(1) }
    }

    pub fn layer<T: Float>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let mut n = Self::group(store, name, dim, 1);
        n.groups = 0;
        n
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        if self.groups == 0 {
            g.layer_norm(x, p[self.gamma], p[self.beta], 1e-5)
        } else {
            g.group_norm(x, p[self.gamma], p[self.beta], self.groups, 1e-5)
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, fin: usize, fout: usize, bias: bool, rng: &mut impl Rng) -> Self {
        // Xavier-style scale keeps attention logits moderate
        let std = (1.0 / fin.max(1) as f64).sqrt();
        let w = store.add(format!("{name}.w"), Tensor::randn(vec![fin, fout], std, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(vec![fout])));
        Linear { w, b }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        g.linear(x, p[self.w], self.b.map(|b| p[b]))
    }
}

/// `conv3×3 → norm → relu → conv3×3 → norm`, plus the skip path. The inner
/// width is a quarter of the block width.
#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
}

impl ResBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let hidden = (channels / 4).max(1);
        ResBlock {
            conv1: Conv::new(store, &format!("{name}.conv1"), channels, hidden, 3, 1, 1, bias, rng),
            norm1: Norm::group(store, &format!("{name}.gn1"), hidden, groups),
            conv2: Conv::new(store, &format!("{name}.conv2"), hidden, channels, 3, 1, 1, bias, rng),
            norm2: Norm::group(store, &format!("{name}.gn2"), channels, groups),
        }
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, p: &ParamVars, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, p, x)?;
        let h = self.norm1.forward(g, p, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, h)?;
        g.add(x, h)
    }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
