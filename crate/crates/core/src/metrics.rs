//! Depth-estimation and instance-mask evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Predictions are clamped to this before ratios and logarithms.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub rmse: f64,
    pub rel: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

/// Standard monocular-depth metrics over `valid` pixels. The δ thresholds
/// are strict: a ratio of exactly 1.25 does not count towards δ1.
pub fn depth_metrics(pred: &[f32], gt: &[f32], valid: &[bool]) -> Result<DepthMetrics> {
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::shape("depth_metrics", format!("{} / {} / {}", pred.len(), gt.len(), valid.len())));
    }
    let (mut n, mut se, mut rel, mut lg) = (0usize, 0.0, 0.0, 0.0);
    let mut hits = [0usize; 3];
    for i in 0..gt.len() {
        if !valid[i] {
            continue;
        }
        let g = gt[i] as f64;
        if g <= 0.0 {
            return Err(Error::Contract(format!("ground truth {g} at valid pixel {i}")));
        }
        let p = pred[i] as f64;
        let pc = p.max(MIN_DEPTH);
        n += 1;
        se += (p - g) * (p - g);
        rel += (p - g).abs() / g;
        lg += (pc.log10() - g.log10()).abs();
        let ratio = (pc / g).max(g / pc);
        for (k, hit) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *hit += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Contract("depth_metrics needs at least one valid pixel".into()));
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        rmse: (se / nf).sqrt(),
        rel: rel / nf,
        log10: lg / nf,
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

/// RMSE over valid pixels; 0 when nothing is valid.
pub fn masked_rmse(pred: &[f32], gt: &[f32], valid: &[bool]) -> f64 {
    let (mut n, mut se) = (0usize, 0.0f64);
    for i in 0..gt.len() {
        if valid[i] {
            let d = pred[i] as f64 - gt[i] as f64;
            se += d * d;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (se / n as f64).sqrt()
    }
}

/// `|a ∩ b| / |a ∪ b|`, defined as 1 for two empty masks.
pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// A full-resolution instance mask with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskInstance {
    pub class_id: usize,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetrics {
    pub mean_iou: f64,
    pub ap: f64,
    pub ap_per_threshold: Vec<f64>,
}

/// `0.50, 0.55, …, 0.95`.
pub fn default_iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Greedy one-to-one matching within each class, highest IoU first; pairs
/// below `min_iou` are never matched. Ties resolve by (pred, gt) index.
pub fn greedy_match(pred: &[MaskInstance], gt: &[MaskInstance], min_iou: f64) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (p, pi) in pred.iter().enumerate() {
        for (g, gi) in gt.iter().enumerate() {
            if pi.class_id == gi.class_id {
                let v = iou(&pi.mask, &gi.mask);
                if v >= min_iou && v > 0.0 {
                    pairs.push((p, g, v));
                }
            }
        }
    }
    pairs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_p = vec![false; pred.len()];
    let mut used_g = vec![false; gt.len()];
    let mut out = Vec::new();
    for (p, g, v) in pairs {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            out.push((p, g, v));
        }
    }
    out
}

/// Mean IoU of ground-truth instances under greedy matching (unmatched
/// count as 0) and a simplified AP: at each threshold, precision × recall
/// of the greedy matching, averaged over thresholds.
pub fn mask_metrics(pred: &[MaskInstance], gt: &[MaskInstance], thresholds: &[f64]) -> MaskMetrics {
    let mean_iou = if gt.is_empty() {
        if pred.is_empty() { 1.0 } else { 0.0 }
    } else {
        greedy_match(pred, gt, 0.0).iter().map(|m| m.2).sum::<f64>() / gt.len() as f64
    };
    let ap_per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&t| {
            if gt.is_empty() {
                return if pred.is_empty() { 1.0 } else { 0.0 };
            }
            if pred.is_empty() {
                return 0.0;
            }
            let tp = greedy_match(pred, gt, t).len() as f64;
            (tp / pred.len() as f64) * (tp / gt.len() as f64)
        })
        .collect();
    let ap = if ap_per_threshold.is_empty() {
        0.0
    } else {
        ap_per_threshold.iter().sum::<f64>() / ap_per_threshold.len() as f64
    };
    MaskMetrics { mean_iou, ap, ap_per_threshold }
}

/// Averages per-image metrics (sum then divide).
pub fn mean_depth_metrics(all: &[DepthMetrics]) -> Option<DepthMetrics> {
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let s = |f: fn(&DepthMetrics) -> f64| all.iter().map(f).sum::<f64>() / n;
    Some(DepthMetrics {
        rmse: s(|m| m.rmse),
        rel: s(|m| m.rel),
        log10: s(|m| m.log10),
        delta1: s(|m| m.delta1),
        delta2: s(|m| m.delta2),
        delta3: s(|m| m.delta3),
    })
}
