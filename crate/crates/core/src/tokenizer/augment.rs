use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Random square-patch blanking of the tokenizer input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskAugSpec {
    pub mask_ratio: f64,
    pub patch_size: usize,
    pub fill_value: f32,
}

impl Default for MaskAugSpec {
    fn default() -> Self {
        MaskAugSpec { mask_ratio: 0.5, patch_size: 16, fill_value: 0.0 }
    }
}

impl MaskAugSpec {
    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.mask_ratio)));
        }
        if self.patch_size == 0 || !h.is_multiple_of(self.patch_size) || !w.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!("patch size {} does not divide {h}x{w}", self.patch_size)));
        }
        Ok(())
    }

    /// Number of patches blanked on an `h×w` input.
    pub fn n_masked(&self, h: usize, w: usize) -> usize {
        let n = (h / self.patch_size) * (w / self.patch_size);
        (self.mask_ratio * n as f64).round() as usize
    }
}

/// Blanks `round(ratio · n_patches)` random patches of `input`. Returns the
/// corrupted input, the untouched supervision target and the loss mask
/// (the original validity).
pub fn mask_augment(
    input: &[f32],
    valid: &[bool],
    h: usize,
    w: usize,
    spec: &MaskAugSpec,
    rng: &mut impl Rng,
) -> Result<(Vec<f32>, Vec<f32>, Vec<bool>)> {
    spec.validate(h, w)?;
    if input.len() != h * w || valid.len() != h * w {
        return Err(Error::shape("mask_augment", format!("{} values / {} flags for {h}x{w}", input.len(), valid.len())));
    }
    let p = spec.patch_size;
    let cols = w / p;
    let n = (h / p) * cols;
    let mut corrupted = input.to_vec();
    for patch in sample(rng, n, spec.n_masked(h, w)).iter() {
        let (py, px) = (patch / cols * p, patch % cols * p);
        for y in py..py + p {
            corrupted[y * w + px..y * w + px + p].fill(spec.fill_value);
        }
    }
    Ok((corrupted, input.to_vec(), valid.to_vec()))
}
