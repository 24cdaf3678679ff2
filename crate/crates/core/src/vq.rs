//! Vector quantization: nearest-code lookup, EMA codebook maintenance, and
//! the soft-token embedding map.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::Archive;
use crate::tensor::{Float, Graph, Tensor, Var};

/// Tolerance on probability rows handed to [`embed_soft`].
pub const PROB_SUM_TOL: f64 = 1e-4;

/// What to do with codes that stop receiving assignments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DeadCodePolicy {
    /// Rely on Laplace smoothing alone.
    #[default]
    None,
    /// Re-seed codes whose EMA usage falls below `min_usage` with random
    /// encoder outputs from the current batch.
    Restart { min_usage: f64 },
}

/// `K×D` code table with the running statistics used by the EMA update.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    pub embeddings: Tensor<T>,
    pub ema_size: Tensor<T>,
    pub ema_sum: Tensor<T>,
    pub decay: f64,
    pub epsilon: f64,
}

impl<T: Float> Codebook<T> {
    /// Uniform init in `±1/K`. The running sum starts at the embeddings with
    /// unit counts, so an unused code keeps its position under decay.
    pub fn new(k: usize, d: usize, decay: f64, epsilon: f64, rng: &mut impl Rng) -> Result<Self> {
        if k < 2 || d == 0 {
            return Err(Error::Config(format!("codebook needs K >= 2 and D >= 1, got {k}x{d}")));
        }
        if !(0.0..1.0).contains(&decay) || epsilon <= 0.0 {
            return Err(Error::Config(format!("decay {decay} / epsilon {epsilon} out of range")));
        }
        let bound = 1.0 / k as f64;
        let embeddings = Tensor::uniform(vec![k, d], -bound, bound, rng);
        Ok(Self::from_embeddings(embeddings, decay, epsilon))
    }

    pub fn from_embeddings(embeddings: Tensor<T>, decay: f64, epsilon: f64) -> Self {
        let k = embeddings.shape()[0];
        Codebook {
            ema_size: Tensor::ones(vec![k]),
            ema_sum: embeddings.clone(),
            embeddings,
            decay,
            epsilon,
        }
    }

    pub fn size(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn row(&self, k: usize) -> &[T] {
        self.embeddings.row(k)
    }

    /// Seeds every code with a distinct random row of `z` (rows are reused
    /// only when `z` has fewer rows than codes).
    pub fn init_from(&mut self, z: &Tensor<T>, rng: &mut impl Rng) -> Result<()> {
        let (n, d) = self.check_z(z)?;
        if n == 0 {
            return Ok(());
        }
        let k = self.size();
        let picks: Vec<usize> = if n >= k {
            sample(rng, n, k).into_vec()
        } else {
            (0..k).map(|i| if i < n { i } else { rng.random_range(0..n) }).collect()
        };
        let emb = self.embeddings.data_mut();
        for (code, &src) in picks.iter().enumerate() {
            emb[code * d..(code + 1) * d].copy_from_slice(&z.data()[src * d..(src + 1) * d]);
        }
        self.ema_sum = self.embeddings.clone();
        self.ema_size = Tensor::ones(vec![k]);
        Ok(())
    }

    fn check_z(&self, z: &Tensor<T>) -> Result<(usize, usize)> {
        if z.ndim() != 2 || z.shape()[1] != self.dim() {
            return Err(Error::shape(
                "quantize",
                format!("z {:?} vs codebook {:?}", z.shape(), self.embeddings.shape()),
            ));
        }
        Ok((z.shape()[0], self.dim()))
    }

    /// Nearest code under squared Euclidean distance; ties go to the lowest
    /// index.
    pub fn quantize_hard(&self, z: &Tensor<T>) -> Result<(Vec<usize>, Tensor<T>)> {
        let (n, d) = self.check_z(z)?;
        let emb = self.embeddings.data();
        let mut indices = Vec::with_capacity(n);
        let mut zq = Vec::with_capacity(n * d);
        for row in z.data().chunks(d.max(1)).take(n) {
            let mut best = 0;
            let mut best_dist = T::infinity();
            for (k, e) in emb.chunks(d).enumerate() {
                let dist: T = row.iter().zip(e).map(|(&a, &b)| (a - b) * (a - b)).sum();
                if dist < best_dist {
                    best = k;
                    best_dist = dist;
                }
            }
            indices.push(best);
            zq.extend_from_slice(&emb[best * d..(best + 1) * d]);
        }
        Ok((indices, Tensor::new(vec![n, d], zq)?))
    }

    pub fn embed_indices(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let (k, d) = (self.size(), self.dim());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(Error::Index { op: "embed_indices", index: i, limit: k });
            }
            data.extend_from_slice(self.row(i));
        }
        Tensor::new(vec![indices.len(), d], data)
    }

    /// Eager soft embedding `probs · E`.
    pub fn embed_soft(&self, probs: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = g.constant(probs.clone());
        let e = g.constant(self.embeddings.clone());
        let out = embed_soft(&mut g, p, e)?;
        Ok(g.value(out).clone())
    }

    /// One EMA step over the assignments of a batch, followed by the
    /// Laplace-smoothed re-estimate of every row.
    pub fn ema_update(&mut self, z: &Tensor<T>, indices: &[usize]) -> Result<()> {
        let (n, d) = self.check_z(z)?;
        let k = self.size();
        if indices.len() != n {
            return Err(Error::shape("ema_update", format!("{} indices for {n} rows", indices.len())));
        }
        let mut counts = vec![0.0f64; k];
        let mut sums = vec![0.0f64; k * d];
        for (row, &i) in z.data().chunks(d).zip(indices) {
            if i >= k {
                return Err(Error::Index { op: "ema_update", index: i, limit: k });
            }
            counts[i] += 1.0;
            for (s, &v) in sums[i * d..(i + 1) * d].iter_mut().zip(row) {
                *s += v.as_f64();
            }
        }
        let (decay, keep) = (self.decay, 1.0 - self.decay);
        for (s, &c) in self.ema_size.data_mut().iter_mut().zip(&counts) {
            *s = T::of_f64(decay * s.as_f64() + keep * c);
        }
        for (s, &v) in self.ema_sum.data_mut().iter_mut().zip(&sums) {
            *s = T::of_f64(decay * s.as_f64() + keep * v);
        }
        self.refresh_embeddings();
        Ok(())
    }

    fn refresh_embeddings(&mut self) {
        let (k, d) = (self.size(), self.dim());
        let total: f64 = self.ema_size.data().iter().map(|v| v.as_f64()).sum();
        let eps = self.epsilon;
        for c in 0..k {
            let smoothed = (self.ema_size.data()[c].as_f64() + eps) / (total + k as f64 * eps) * total;
            let smoothed = if smoothed > 0.0 { smoothed } else { eps };
            for j in 0..d {
                let v = self.ema_sum.data()[c * d + j].as_f64() / smoothed;
                self.embeddings.data_mut()[c * d + j] = T::of_f64(v);
            }
        }
    }

    /// Applies `policy` after an update; returns how many codes moved.
    pub fn apply_dead_code_policy(
        &mut self,
        policy: DeadCodePolicy,
        z: &Tensor<T>,
        rng: &mut impl Rng,
    ) -> Result<usize> {
        let DeadCodePolicy::Restart { min_usage } = policy else {
            return Ok(0);
        };
        let (n, d) = self.check_z(z)?;
        if n == 0 {
            return Ok(0);
        }
        let mut moved = 0;
        for c in 0..self.size() {
            if self.ema_size.data()[c].as_f64() >= min_usage {
                continue;
            }
            let src = rng.random_range(0..n);
            let row = &z.data()[src * d..(src + 1) * d];
            self.embeddings.data_mut()[c * d..(c + 1) * d].copy_from_slice(row);
            self.ema_sum.data_mut()[c * d..(c + 1) * d].copy_from_slice(row);
            self.ema_size.data_mut()[c] = T::one();
            moved += 1;
        }
        Ok(moved)
    }

    pub fn cast<U: Float>(&self) -> Codebook<U> {
        Codebook {
            embeddings: self.embeddings.cast(),
            ema_size: self.ema_size.cast(),
            ema_sum: self.ema_sum.cast(),
            decay: self.decay,
            epsilon: self.epsilon,
        }
    }

    pub fn save_into(&self, archive: &mut Archive<T>) {
        archive.push("codebook.embeddings", self.embeddings.clone());
        archive.push("codebook.ema_size", self.ema_size.clone());
        archive.push("codebook.ema_sum", self.ema_sum.clone());
    }

    pub fn load_from(archive: &Archive<T>, decay: f64, epsilon: f64) -> Result<Self> {
        let embeddings = archive.require("codebook.embeddings")?.clone();
        let ema_size = archive.require("codebook.ema_size")?.clone();
        let ema_sum = archive.require("codebook.ema_sum")?.clone();
        let (k, d) = match embeddings.shape() {
            [k, d] => (*k, *d),
            s => return Err(Error::Format(format!("codebook.embeddings has shape {s:?}"))),
        };
        if ema_size.shape() != [k] || ema_sum.shape() != [k, d] {
            return Err(Error::Format("codebook statistics do not match the embeddings".into()));
        }
        Ok(Codebook { embeddings, ema_size, ema_sum, decay, epsilon })
    }
}

/// Soft token embedding on the tape: `probs [N,K] · table [K,D]`. Rows of
/// `probs` must be probability vectors.
pub fn embed_soft<T: Float>(g: &mut Graph<T>, probs: Var, table: Var) -> Result<Var> {
    let ps = g.shape(probs);
    if ps.len() != 2 {
        return Err(Error::shape("embed_soft", format!("probs {ps:?} must be [N, K]")));
    }
    let k = ps[1];
    for (i, row) in g.value(probs).data().chunks(k.max(1)).enumerate() {
        let s: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (s - 1.0).abs() > PROB_SUM_TOL || row.iter().any(|v| v.as_f64() < 0.0) {
            return Err(Error::Contract(format!("probability row {i} sums to {s}")));
        }
    }
    g.matmul(probs, table)
}

/// `beta · mean((z − sg(z_q))²)`; the gradient reaches `z` only.
pub fn commitment_loss<T: Float>(g: &mut Graph<T>, z: Var, z_q: Var, beta: f64) -> Result<Var> {
    let target = g.detach(z_q);
    let diff = g.sub(z, target)?;
    let sq = g.mul(diff, diff)?;
    let m = g.mean(sq);
    Ok(g.scale(m, T::of_f64(beta)))
}

/// Whether `row` is a nonnegative vector summing to 1 within `tol`.
pub fn is_distribution<T: Float>(row: &[T], tol: f64) -> bool {
    let s: f64 = row.iter().map(|v| v.as_f64()).sum();
    row.iter().all(|v| v.as_f64() >= 0.0) && (s - 1.0).abs() <= tol
}
