use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Float, ParamStore};
use crate::error::{Error, Result};

/// Learning-rate schedule, evaluated once per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// `lr * decay^epoch`.
    Exponential { decay: f64 },
    /// Half-cosine from `lr` to 0 over the run.
    Cosine,
    /// Multiply by `gamma` at each milestone epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Linear decay from `lr` to 0 over the run.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            epochs: 20,
            batch_size: 8,
            schedule: Schedule::Exponential { decay: 0.98 },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr > 0.0) || !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::Config(format!(
                "need lr > 0 and 0 < beta1, beta2 < 1 (lr {}, betas {}, {})",
                self.lr, self.beta1, self.beta2
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let total = self.epochs.max(1) as f64;
        let e = epoch as f64;
        match &self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Exponential { decay } => self.lr * decay.powi(epoch as i32),
            Schedule::Cosine => self.lr * 0.5 * (1.0 + (std::f64::consts::PI * e / total).cos()),
            Schedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                self.lr * gamma.powi(passed as i32)
            }
            Schedule::Linear => self.lr * (1.0 - e / total),
        }
    }
}

/// RNG for one epoch, derived from the run seed so that resuming at any
/// epoch replays the same stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut z = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// One Adam update with bias correction and decoupled weight decay over
/// every trainable parameter that has a gradient; parameters the step did
/// not reach keep their value, moments and step count. Gradients are
/// consumed.
pub fn adam_step<T: Float>(params: &mut ParamStore<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
    if params.iter().all(|p| !p.trainable || p.grad.is_none()) {
        return Err(Error::Contract("no parameter has a gradient; run backward before stepping".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    for p in params.iter_mut().filter(|p| p.trainable && p.grad.is_some()) {
        let grad = p.grad.take().unwrap();
        p.step += 1;
        let bc1 = 1.0 - b1.powi(p.step as i32);
        let bc2 = 1.0 - b2.powi(p.step as i32);
        let (lr_t, wd) = (T::of_f64(lr), T::of_f64(lr * cfg.weight_decay));
        let (b1t, b2t) = (T::of_f64(b1), T::of_f64(b2));
        let (ib1, ib2) = (T::of_f64(1.0 - b1), T::of_f64(1.0 - b2));
        let (bc1, bc2, eps) = (T::of_f64(bc1), T::of_f64(bc2), T::of_f64(cfg.eps));
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let g = grad.data()[i];
            m[i] = b1t * m[i] + ib1 * g;
            v[i] = b2t * v[i] + ib2 * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            *w = *w - wd * *w - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
