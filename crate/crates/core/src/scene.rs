//! Procedural scenes: shaded rectangles and ellipses over a flat backdrop,
//! with per-pixel depth and visible-region instance masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::io::Archive;
use crate::tensor::Tensor;

/// Side of the square instance crop fed to the mask tokenizer.
pub const MASK_SIDE: usize = 64;

/// Upper end of the depth range; depth is normalized by this value.
pub const MAX_DEPTH: f32 = 10.0;

const PALETTE: [[f32; 3]; 8] = [
    [1.0, 0.35, 0.3],
    [0.3, 0.9, 0.35],
    [0.35, 0.45, 1.0],
    [0.95, 0.85, 0.3],
    [0.85, 0.35, 0.9],
    [0.3, 0.9, 0.9],
    [1.0, 0.6, 0.2],
    [0.6, 0.6, 0.6],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub primitives: Vec<Primitive>,
    pub n_classes: usize,
    /// Object extent as a fraction of the image side.
    pub min_extent: f32,
    pub max_extent: f32,
    pub depth_min: f32,
    pub depth_max: f32,
    pub background_depth: f32,
    pub shade: f32,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 64,
            min_objects: 1,
            max_objects: 3,
            primitives: vec![Primitive::Rectangle, Primitive::Ellipse],
            n_classes: 3,
            min_extent: 0.2,
            max_extent: 0.6,
            depth_min: 0.5,
            depth_max: MAX_DEPTH,
            background_depth: 9.0,
            shade: 0.8,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 4 {
            return bad(format!("image_size {} too small", self.image_size));
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects".into());
        }
        if self.primitives.is_empty() || self.n_classes == 0 || self.n_classes > PALETTE.len() {
            return bad(format!("need primitives and 1..={} classes", PALETTE.len()));
        }
        if !(0.0 < self.min_extent && self.min_extent <= self.max_extent && self.max_extent <= 1.0) {
            return bad("extents must satisfy 0 < min <= max <= 1".into());
        }
        if !(0.0 < self.depth_min && self.depth_min + 1.2 < self.background_depth && self.background_depth <= self.depth_max) {
            return bad("need 0 < depth_min < background_depth - 1.2 <= depth_max".into());
        }
        Ok(())
    }
}

/// Depth in meters with a validity mask. Invalid pixels hold 0.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(h: usize, w: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != h * w || valid.len() != h * w {
            return Err(Error::shape("depth_map", format!("{h}x{w} with {} values, {} flags", values.len(), valid.len())));
        }
        if values.iter().zip(&valid).any(|(v, &ok)| ok && !v.is_finite()) {
            return Err(Error::Contract("non-finite depth at a valid pixel".into()));
        }
        Ok(DepthMap { h, w, values, valid })
    }

    pub fn all_valid(h: usize, w: usize, values: Vec<f32>) -> Result<Self> {
        Self::new(h, w, values, vec![true; h * w])
    }

    /// Values divided by [`MAX_DEPTH`], i.e. in `[0, 1]`.
    pub fn normalized(&self) -> Vec<f32> {
        self.values.iter().map(|v| v / MAX_DEPTH).collect()
    }
}

/// One object: normalized box `(x0, y0, x1, y1)`, class and a 64×64 crop
/// of its visible region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceAnnotation {
    pub bbox: [f32; 4],
    pub class_id: usize,
    pub mask64: Vec<bool>,
    pub is_noise: bool,
}

impl InstanceAnnotation {
    pub fn new(bbox: [f32; 4], class_id: usize, mask64: Vec<bool>) -> Result<Self> {
        check_box(&bbox)?;
        if mask64.len() != MASK_SIDE * MASK_SIDE {
            return Err(Error::shape("instance", format!("mask has {} pixels", mask64.len())));
        }
        Ok(InstanceAnnotation { bbox, class_id, mask64, is_noise: false })
    }

    /// Box in pixel units, `[x0, y0, x1, y1)` with exclusive ends.
    pub fn pixel_box(&self, h: usize, w: usize) -> [usize; 4] {
        pixel_box(&self.bbox, h, w)
    }
}

pub fn check_box(b: &[f32; 4]) -> Result<()> {
    let ok = b.iter().all(|v| (0.0..=1.0).contains(v)) && b[0] <= b[2] && b[1] <= b[3];
    if ok {
        Ok(())
    } else {
        Err(Error::Contract(format!("box {b:?} is not normalized")))
    }
}

/// Rounds a normalized box to pixels, keeping at least one pixel per side.
pub fn pixel_box(b: &[f32; 4], h: usize, w: usize) -> [usize; 4] {
    let r = |v: f32, n: usize| ((v * n as f32).round().max(0.0) as usize).min(n);
    let (x0, y0) = (r(b[0], w).min(w - 1), r(b[1], h).min(h - 1));
    let (x1, y1) = (r(b[2], w).max(x0 + 1), r(b[3], h).max(y0 + 1));
    [x0, y0, x1, y1]
}

/// Samples the region `[x0,x1)×[y0,y1)` of a full-image mask onto a
/// 64×64 grid at pixel centers.
pub fn crop_mask(full: &[bool], h: usize, w: usize, pbox: [usize; 4]) -> Vec<bool> {
    let [x0, y0, x1, y1] = pbox;
    let (bw, bh) = (x1 - x0, y1 - y0);
    let mut out = vec![false; MASK_SIDE * MASK_SIDE];
    for i in 0..MASK_SIDE {
        let sy = y0 + ((i as f32 + 0.5) * bh as f32 / MASK_SIDE as f32) as usize;
        for j in 0..MASK_SIDE {
            let sx = x0 + ((j as f32 + 0.5) * bw as f32 / MASK_SIDE as f32) as usize;
            out[i * MASK_SIDE + j] = full[sy.min(h - 1) * w + sx.min(w - 1)];
        }
    }
    out
}

/// Inverse of [`crop_mask`]: paints a 64×64 crop into its box on an
/// `h×w` canvas.
pub fn paste_mask(mask64: &[bool], pbox: [usize; 4], h: usize, w: usize) -> Vec<bool> {
    let [x0, y0, x1, y1] = pbox;
    let (bw, bh) = (x1 - x0, y1 - y0);
    let mut out = vec![false; h * w];
    for dy in 0..bh {
        let i = (((dy as f32 + 0.5) * MASK_SIDE as f32 / bh as f32) as usize).min(MASK_SIDE - 1);
        for dx in 0..bw {
            let j = (((dx as f32 + 0.5) * MASK_SIDE as f32 / bw as f32) as usize).min(MASK_SIDE - 1);
            if y0 + dy < h && x0 + dx < w {
                out[(y0 + dy) * w + x0 + dx] = mask64[i * MASK_SIDE + j];
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    /// `[3, H, W]` shaded rendering in `[0, 1]`.
    pub image: Tensor<f32>,
    pub depth: DepthMap,
    pub instances: Vec<InstanceAnnotation>,
    /// Full-resolution visible mask per instance.
    pub masks: Vec<Vec<bool>>,
}

struct Object {
    prim: Primitive,
    class_id: usize,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    d0: f32,
    gx: f32,
    gy: f32,
}

impl Object {
    fn covers(&self, x: usize, y: usize) -> bool {
        if x < self.x0 || x >= self.x1 || y < self.y0 || y >= self.y1 {
            return false;
        }
        match self.prim {
            Primitive::Rectangle => true,
            Primitive::Ellipse => {
                let (u, v) = self.local(x, y);
                u * u + v * v <= 0.25
            }
        }
    }

    /// Pixel center in box coordinates, each axis in `[-0.5, 0.5]`.
    fn local(&self, x: usize, y: usize) -> (f32, f32) {
        let u = (x as f32 + 0.5 - self.x0 as f32) / (self.x1 - self.x0) as f32 - 0.5;
        let v = (y as f32 + 0.5 - self.y0 as f32) / (self.y1 - self.y0) as f32 - 0.5;
        (u, v)
    }

    fn depth_at(&self, x: usize, y: usize) -> f32 {
        let (u, v) = self.local(x, y);
        self.d0 + self.gx * u + self.gy * v
    }
}

pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = spec.image_size;
    let n_obj = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let prim = spec.primitives[rng.random_range(0..spec.primitives.len())];
        let class_id = rng.random_range(0..spec.n_classes);
        let ext = |rng: &mut ChaCha8Rng| {
            let f = rng.random_range(spec.min_extent..=spec.max_extent);
            ((f * s as f32).round() as usize).clamp(2, s)
        };
        let (bw, bh) = (ext(&mut rng), ext(&mut rng));
        let x0 = rng.random_range(0..=s - bw);
        let y0 = rng.random_range(0..=s - bh);
        let d0 = rng.random_range(spec.depth_min + 0.6..spec.background_depth - 0.6);
        let gx = rng.random_range(-1.0..1.0f32);
        let gy = rng.random_range(-1.0..1.0f32);
        objects.push(Object { prim, class_id, x0, y0, x1: x0 + bw, y1: y0 + bh, d0, gx, gy });
    }

    // z-buffer: the nearest surface wins each pixel
    let mut depth = vec![spec.background_depth; s * s];
    let mut owner: Vec<Option<usize>> = vec![None; s * s];
    for (k, o) in objects.iter().enumerate() {
        for y in o.y0..o.y1 {
            for x in o.x0..o.x1 {
                if o.covers(x, y) {
                    let d = o.depth_at(x, y);
                    if d < depth[y * s + x] {
                        depth[y * s + x] = d;
                        owner[y * s + x] = Some(k);
                    }
                }
            }
        }
    }

    let mut image = vec![0.0f32; 3 * s * s];
    for p in 0..s * s {
        let near = 1.0 - depth[p] / spec.depth_max;
        let tint = match owner[p] {
            Some(k) => PALETTE[objects[k].class_id],
            None => [0.5, 0.5, 0.5],
        };
        for c in 0..3 {
            image[c * s * s + p] = (0.05 + spec.shade * near * tint[c]).clamp(0.0, 1.0);
        }
    }

    let mut instances = Vec::new();
    let mut masks = Vec::new();
    for (k, o) in objects.iter().enumerate() {
        let full: Vec<bool> = owner.iter().map(|&w| w == Some(k)).collect();
        let Some(pbox) = tight_box(&full, s, s) else { continue };
        let bbox = pbox.map(|v| v as f32 / s as f32);
        instances.push(InstanceAnnotation::new(bbox, o.class_id, crop_mask(&full, s, s, pbox))?);
        masks.push(full);
    }

    Ok(SyntheticScene {
        image: Tensor::new(vec![3, s, s], image)?,
        depth: DepthMap::all_valid(s, s, depth)?,
        instances,
        masks,
    })
}

/// Smallest pixel box `[x0, y0, x1, y1)` around the set pixels.
pub fn tight_box(mask: &[bool], h: usize, w: usize) -> Option<[usize; 4]> {
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x1 > 0).then_some([x0, y0, x1, y1])
}

/// Observed depth after hole punching, plus what was removed.
#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedDepth {
    pub observed: DepthMap,
    pub ground_truth: DepthMap,
    pub holes: Vec<bool>,
}

/// Marks irregular blobs invalid (value 0) until roughly `fraction` of the
/// pixels are covered. Blobs are chains of disks along a random walk.
pub fn corrupt_depth(depth: &DepthMap, fraction: f64, seed: u64) -> Result<CorruptedDepth> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Config(format!("hole fraction {fraction} outside [0, 1)")));
    }
    let (h, w) = (depth.h, depth.w);
    let total = h * w;
    let target = (fraction * total as f64).round() as usize;
    let mut holes = vec![false; total];
    let mut covered = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // a single disk may overshoot by at most this many pixels
    let slack = ((0.15 * target as f64).max(1.0)) as usize;
    let max_r = ((slack as f64 / std::f64::consts::PI).sqrt()).max(0.5);
    let base_r = (h.min(w) as f64 / 10.0).max(1.0);
    while covered < target {
        let mut cx = rng.random_range(0.0..w as f64);
        let mut cy = rng.random_range(0.0..h as f64);
        for _ in 0..12 {
            if covered >= target {
                break;
            }
            let remaining = (target - covered) as f64;
            let cap = max_r.max((remaining / std::f64::consts::PI).sqrt());
            let r = (base_r * rng.random_range(0.5..1.2)).min(cap).max(0.5);
            let (ylo, yhi) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
            let (xlo, xhi) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
            for y in ylo..yhi {
                for x in xlo..xhi {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    if dx * dx + dy * dy <= r * r && !holes[y * w + x] {
                        holes[y * w + x] = true;
                        covered += 1;
                    }
                }
            }
            let step = r * 1.2;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            cx = (cx + step * theta.cos()).clamp(0.0, w as f64 - 1e-6);
            cy = (cy + step * theta.sin()).clamp(0.0, h as f64 - 1e-6);
        }
    }
    let mut values = depth.values.clone();
    let mut valid = depth.valid.clone();
    for p in 0..total {
        if holes[p] {
            values[p] = 0.0;
            valid[p] = false;
        }
    }
    Ok(CorruptedDepth {
        observed: DepthMap::new(h, w, values, valid)?,
        ground_truth: depth.clone(),
        holes,
    })
}

impl SyntheticScene {
    pub fn to_archive(&self, manifest: serde_json::Value) -> Result<Archive<f32>> {
        let (h, w) = (self.depth.h, self.depth.w);
        let n = self.instances.len();
        let mut a = Archive::new(manifest);
        a.push("image", self.image.clone());
        a.push("depth", Tensor::new(vec![h, w], self.depth.values.clone())?);
        a.push("valid", bool_tensor(vec![h, w], &self.depth.valid)?);
        let boxes = self.instances.iter().flat_map(|i| i.bbox).collect();
        a.push("instances.boxes", Tensor::new(vec![n, 4], boxes)?);
        let classes = self.instances.iter().map(|i| i.class_id as f32).collect();
        a.push("instances.classes", Tensor::new(vec![n], classes)?);
        let crops: Vec<bool> = self.instances.iter().flat_map(|i| i.mask64.iter().copied()).collect();
        a.push("instances.masks", bool_tensor(vec![n, MASK_SIDE, MASK_SIDE], &crops)?);
        let full: Vec<bool> = self.masks.iter().flatten().copied().collect();
        a.push("instances.full", bool_tensor(vec![n, h, w], &full)?);
        Ok(a)
    }

    pub fn from_archive(a: &Archive<f32>) -> Result<Self> {
        let image = a.require("image")?.clone();
        let depth = a.require("depth")?;
        let (h, w) = match depth.shape() {
            [h, w] => (*h, *w),
            s => return Err(Error::Format(format!("depth has shape {s:?}"))),
        };
        let valid = a.require("valid")?.data().iter().map(|&v| v != 0.0).collect();
        let boxes = a.require("instances.boxes")?;
        let classes = a.require("instances.classes")?;
        let crops = a.require("instances.masks")?;
        let full = a.require("instances.full")?;
        let n = classes.numel();
        if boxes.numel() != 4 * n || crops.numel() != n * MASK_SIDE * MASK_SIDE || full.numel() != n * h * w {
            return Err(Error::Format("instance records disagree in count".into()));
        }
        let mut instances = Vec::with_capacity(n);
        let mut masks = Vec::with_capacity(n);
        for i in 0..n {
            let b = boxes.row(i);
            let m = crops.data()[i * MASK_SIDE * MASK_SIDE..(i + 1) * MASK_SIDE * MASK_SIDE]
                .iter()
                .map(|&v| v != 0.0)
                .collect();
            instances.push(InstanceAnnotation::new([b[0], b[1], b[2], b[3]], classes.data()[i] as usize, m)?);
            masks.push(full.data()[i * h * w..(i + 1) * h * w].iter().map(|&v| v != 0.0).collect());
        }
        Ok(SyntheticScene {
            image,
            depth: DepthMap::new(h, w, depth.data().to_vec(), valid)?,
            instances,
            masks,
        })
    }
}

fn bool_tensor(shape: Vec<usize>, v: &[bool]) -> Result<Tensor<f32>> {
    Tensor::new(shape, v.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

/// Binary PGM (P5) encoding of a `[0, 1]` grayscale plane.
pub fn to_pgm(values: &[f32], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}
