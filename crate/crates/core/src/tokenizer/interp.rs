//! Parameter-free baseline: resample the output to the token grid and bin
//! the values.

use serde::{Deserialize, Serialize};

use super::{MaskCodec, TokenGrid};
use crate::error::{Error, Result};
use crate::scene::{MASK_SIDE, MAX_DEPTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpMode {
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationTokenizer {
    pub ratio: usize,
    pub mode: InterpMode,
    pub n_bins: usize,
    pub range: [f32; 2],
}

impl InterpolationTokenizer {
    pub fn new(ratio: usize, mode: InterpMode, n_bins: usize, range: [f32; 2]) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::Config(format!("n_bins must be >= 2, got {n_bins}")));
        }
        if ratio == 0 || range[0] >= range[1] {
            return Err(Error::Config(format!("ratio {ratio} / range {range:?} invalid")));
        }
        Ok(InterpolationTokenizer { ratio, mode, n_bins, range })
    }

    /// Nearest-neighbour binary masks, two bins over `[0, 1]`.
    pub fn for_masks(ratio: usize) -> Self {
        Self::new(ratio, InterpMode::Nearest, 2, [0.0, 1.0]).unwrap()
    }

    /// Bilinear depth in meters, binned over `[0, 10]`.
    pub fn for_depth(ratio: usize, n_bins: usize) -> Result<Self> {
        Self::new(ratio, InterpMode::Bilinear, n_bins, [0.0, MAX_DEPTH])
    }

    fn bin(&self, v: f64) -> usize {
        let [lo, hi] = self.range.map(f64::from);
        let t = ((v - lo) / (hi - lo) * self.n_bins as f64).floor();
        (t.max(0.0) as usize).min(self.n_bins - 1)
    }

    pub fn bin_center(&self, k: usize) -> f64 {
        let [lo, hi] = self.range.map(f64::from);
        lo + (k as f64 + 0.5) / self.n_bins as f64 * (hi - lo)
    }

    pub fn encode(&self, values: &[f32], h: usize, w: usize) -> Result<TokenGrid> {
        let r = self.ratio;
        if values.len() != h * w || !h.is_multiple_of(r) || !w.is_multiple_of(r) {
            return Err(Error::shape("interp_encode", format!("{} values for {h}x{w} at ratio {r}", values.len())));
        }
        let (gh, gw) = (h / r, w / r);
        let mut ids = Vec::with_capacity(gh * gw);
        for i in 0..gh {
            for j in 0..gw {
                let v = match self.mode {
                    InterpMode::Nearest => {
                        let (y, x) = (((i as f64 + 0.5) * r as f64) as usize, ((j as f64 + 0.5) * r as f64) as usize);
                        values[y.min(h - 1) * w + x.min(w - 1)] as f64
                    }
                    InterpMode::Bilinear => {
                        let sy = (i as f64 + 0.5) * r as f64 - 0.5;
                        let sx = (j as f64 + 0.5) * r as f64 - 0.5;
                        bilinear(values, h, w, sy, sx)
                    }
                };
                ids.push(self.bin(v));
            }
        }
        Ok(TokenGrid { h: gh, w: gw, ids })
    }

    /// Values at full resolution from per-cell values.
    fn upsample(&self, cells: &[f64], gh: usize, gw: usize) -> Vec<f32> {
        let r = self.ratio;
        let (h, w) = (gh * r, gw * r);
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = match self.mode {
                    InterpMode::Nearest => cells[(y / r) * gw + x / r] as f32,
                    InterpMode::Bilinear => {
                        let sy = (y as f64 + 0.5) / r as f64 - 0.5;
                        let sx = (x as f64 + 0.5) / r as f64 - 0.5;
                        bilinear_f64(cells, gh, gw, sy, sx) as f32
                    }
                };
            }
        }
        out
    }

    pub fn decode(&self, grid: &TokenGrid) -> Result<Vec<f32>> {
        if grid.ids.len() != grid.h * grid.w {
            return Err(Error::shape("interp_decode", format!("{} ids for {}x{}", grid.ids.len(), grid.h, grid.w)));
        }
        let mut cells = Vec::with_capacity(grid.ids.len());
        for &id in &grid.ids {
            if id >= self.n_bins {
                return Err(Error::Index { op: "interp_decode", index: id, limit: self.n_bins });
            }
            cells.push(self.bin_center(id));
        }
        Ok(self.upsample(&cells, grid.h, grid.w))
    }

    /// Expected bin value per cell, then upsampled.
    pub fn decode_soft(&self, probs: &[f32], gh: usize, gw: usize) -> Result<Vec<f32>> {
        let k = self.n_bins;
        if probs.len() != gh * gw * k {
            return Err(Error::shape("interp_decode", format!("{} probabilities for {gh}x{gw} over {k}", probs.len())));
        }
        let cells: Vec<f64> = probs
            .chunks(k)
            .map(|row| row.iter().enumerate().map(|(b, &p)| p as f64 * self.bin_center(b)).sum())
            .collect();
        Ok(self.upsample(&cells, gh, gw))
    }
}

fn bilinear(values: &[f32], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let at = |y: usize, x: usize| values[y * w + x] as f64;
    interp2(at, h, w, sy, sx)
}

fn bilinear_f64(values: &[f64], h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    interp2(|y, x| values[y * w + x], h, w, sy, sx)
}

fn interp2(at: impl Fn(usize, usize) -> f64, h: usize, w: usize, sy: f64, sx: f64) -> f64 {
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

impl MaskCodec for InterpolationTokenizer {
    fn grid(&self) -> (usize, usize) {
        let s = MASK_SIDE / self.ratio;
        (s, s)
    }

    fn codebook_size(&self) -> usize {
        self.n_bins
    }

    fn encode_masks(&self, masks: &[&[bool]]) -> Result<Vec<Vec<usize>>> {
        masks
            .iter()
            .map(|m| {
                let v: Vec<f32> = m.iter().map(|&b| b as u8 as f32).collect();
                Ok(self.encode(&v, MASK_SIDE, MASK_SIDE)?.ids)
            })
            .collect()
    }

    fn decode_masks_soft(&self, probs: &[Vec<f32>]) -> Result<Vec<Vec<bool>>> {
        let (gh, gw) = self.grid();
        probs
            .iter()
            .map(|p| Ok(self.decode_soft(p, gh, gw)?.into_iter().map(|v| v >= 0.5).collect()))
            .collect()
    }
}
