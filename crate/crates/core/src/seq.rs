//! The shared token vocabulary and the two sequence formats: depth maps as
//! a raster of codebook tokens, and instances as fixed 21-token records
//! (4 coordinates, 1 class, 16 mask codes) closed by EOS.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{check_box, paste_mask, pixel_box, InstanceAnnotation, MASK_SIDE};
use crate::tokenizer::{MaskCodec, TokenGrid};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const DEP: usize = 2;
pub const INS: usize = 3;
const N_SPECIAL: usize = 4;

pub const MASK_TOKENS: usize = 16;
pub const RECORD_LEN: usize = 4 + 1 + MASK_TOKENS;

/// Below this total mass a probability slice is replaced by a one-hot.
pub const MIN_SLICE_MASS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Section {
    Special,
    Coord,
    Class,
    Mask,
    Depth,
}

const SECTIONS: [Section; 5] = [Section::Special, Section::Coord, Section::Class, Section::Mask, Section::Depth];

/// Contiguous id ranges, in order: specials, coordinate bins, classes (the
/// background class last), mask codes, depth codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub n_bins: usize,
    /// Foreground classes; the background token comes after them.
    pub n_classes: usize,
    pub mask_codes: usize,
    pub depth_codes: usize,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { n_bins: 2000, n_classes: 3, mask_codes: 128, depth_codes: 128 }
    }
}

impl Vocabulary {
    pub fn new(n_bins: usize, n_classes: usize, mask_codes: usize, depth_codes: usize) -> Result<Self> {
        if n_bins == 0 || mask_codes == 0 || depth_codes == 0 {
            return Err(Error::Config("vocabulary sections must be nonempty".into()));
        }
        Ok(Vocabulary { n_bins, n_classes, mask_codes, depth_codes })
    }

    fn section_len(&self, s: Section) -> usize {
        match s {
            Section::Special => N_SPECIAL,
            Section::Coord => self.n_bins,
            Section::Class => self.n_classes + 1,
            Section::Mask => self.mask_codes,
            Section::Depth => self.depth_codes,
        }
    }

    pub fn range(&self, s: Section) -> Range<usize> {
        let mut start = 0;
        for t in SECTIONS {
            let len = self.section_len(t);
            if t == s {
                return start..start + len;
            }
            start += len;
        }
        unreachable!()
    }

    pub fn size(&self) -> usize {
        SECTIONS.iter().map(|&s| self.section_len(s)).sum()
    }

    pub fn background(&self) -> usize {
        self.n_classes
    }

    /// Id of `offset` within section `s`.
    pub fn id(&self, s: Section, offset: usize) -> Result<usize> {
        let r = self.range(s);
        if offset >= r.len() {
            return Err(Error::Index { op: "vocabulary", index: offset, limit: r.len() });
        }
        Ok(r.start + offset)
    }

    /// Inverse of [`Vocabulary::id`].
    pub fn locate(&self, id: usize) -> Option<(Section, usize)> {
        SECTIONS.iter().find_map(|&s| {
            let r = self.range(s);
            r.contains(&id).then(|| (s, id - r.start))
        })
    }

    fn expect(&self, id: usize, s: Section, offset: usize) -> Result<usize> {
        match self.locate(id) {
            Some((t, o)) if t == s => Ok(o),
            other => Err(Error::Decode { offset, detail: format!("expected a {s:?} token, found id {id} ({other:?})") }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Dep,
    Ins,
}

impl Task {
    pub fn start_token(self) -> usize {
        match self {
            Task::Dep => DEP,
            Task::Ins => INS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub task: Task,
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
    /// Per-position distributions over the full vocabulary, when decoded.
    #[serde(skip)]
    pub probs: Option<Vec<Vec<f32>>>,
}

impl TokenSequence {
    pub fn new(task: Task, ids: Vec<usize>, loss_mask: Vec<bool>) -> Result<Self> {
        if ids.len() != loss_mask.len() {
            return Err(Error::shape("token_sequence", format!("{} ids, {} mask flags", ids.len(), loss_mask.len())));
        }
        Ok(TokenSequence { task, ids, loss_mask, probs: None })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn check(&self, vocab: &Vocabulary) -> Result<()> {
        if self.ids.len() != self.loss_mask.len() {
            return Err(Error::shape("token_sequence", "loss mask length differs from ids".to_string()));
        }
        match self.ids.iter().position(|&id| id >= vocab.size()) {
            Some(p) => Err(Error::Decode { offset: p, detail: format!("id {} outside vocabulary", self.ids[p]) }),
            None => Ok(()),
        }
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let s: TokenSequence = serde_json::from_str(line)?;
        if s.ids.len() != s.loss_mask.len() {
            return Err(Error::Format("loss_mask length differs from ids".into()));
        }
        Ok(s)
    }
}

/// Coordinates are binned as `floor(c·n)`, clamped to the last bin.
pub fn quantize_box(b: &[f32; 4], n_bins: usize) -> Result<[usize; 4]> {
    const TOL: f32 = 1e-6;
    let mut out = [0; 4];
    for (o, &c) in out.iter_mut().zip(b) {
        if !(-TOL..=1.0 + TOL).contains(&c) {
            return Err(Error::Contract(format!("coordinate {c} outside [0, 1]")));
        }
        let c = c.clamp(0.0, 1.0) as f64;
        *o = ((c * n_bins as f64).floor() as usize).min(n_bins - 1);
    }
    Ok(out)
}

/// Bin centers `(t + 0.5) / n`.
pub fn dequantize_box(t: &[usize; 4], n_bins: usize) -> [f32; 4] {
    t.map(|v| ((v as f64 + 0.5) / n_bins as f64) as f32)
}

/// Pix2Seq-style distractors: half are jittered copies of real boxes, the
/// rest uniform random boxes. Without real boxes all are random.
pub fn noise_instances(real: &[InstanceAnnotation], n: usize, background: usize, rng: &mut impl Rng) -> Vec<InstanceAnnotation> {
    let n_jitter = if real.is_empty() { 0 } else { n / 2 };
    (0..n)
        .map(|i| {
            let bbox = if i < n_jitter {
                let b = real[rng.random_range(0..real.len())].bbox;
                let (w, h) = ((b[2] - b[0]).max(0.02), (b[3] - b[1]).max(0.02));
                let mut j = |c: f32, s: f32| (c + rng.random_range(-0.2..=0.2f32) * s).clamp(0.0, 1.0);
                let (x0, y0, x1, y1) = (j(b[0], w), j(b[1], h), j(b[2], w), j(b[3], h));
                [x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)]
            } else {
                let (a, b): (f32, f32) = (rng.random(), rng.random());
                let (c, d): (f32, f32) = (rng.random(), rng.random());
                [a.min(b), c.min(d), a.max(b), c.max(d)]
            };
            InstanceAnnotation { bbox, class_id: background, mask64: vec![false; MASK_SIDE * MASK_SIDE], is_noise: true }
        })
        .collect()
}

/// Record order for one sequence: real instances shuffled, then any
/// instances already flagged as noise, then `n_noise` fresh distractors.
pub fn instance_records(
    instances: &[InstanceAnnotation],
    n_noise: usize,
    background: usize,
    rng: &mut impl Rng,
) -> Vec<InstanceAnnotation> {
    let mut records: Vec<InstanceAnnotation> = instances.iter().filter(|i| !i.is_noise).cloned().collect();
    records.shuffle(rng);
    let fresh = noise_instances(&records, n_noise, background, rng);
    records.extend(instances.iter().filter(|i| i.is_noise).cloned());
    records.extend(fresh);
    records
}

/// Real instances in a shuffled order, then noise records, then EOS. Noise
/// records use the background class and an empty mask whose tokens carry
/// no loss; their coordinates and class are still supervised.
pub fn encode_instances(
    instances: &[InstanceAnnotation],
    vocab: &Vocabulary,
    codec: &dyn MaskCodec,
    n_noise: usize,
    rng: &mut impl Rng,
) -> Result<TokenSequence> {
    encode_records(&instance_records(instances, n_noise, vocab.background(), rng), vocab, codec)
}

/// Encodes records in the given order, closing with EOS.
pub fn encode_records(records: &[InstanceAnnotation], vocab: &Vocabulary, codec: &dyn MaskCodec) -> Result<TokenSequence> {
    let (gh, gw) = codec.grid();
    if gh * gw != MASK_TOKENS {
        return Err(Error::Config(format!("mask tokenizer grid {gh}x{gw} must hold {MASK_TOKENS} tokens")));
    }
    if codec.codebook_size() != vocab.mask_codes {
        return Err(Error::Config(format!("mask codebook {} vs vocabulary {}", codec.codebook_size(), vocab.mask_codes)));
    }
    let masks: Vec<&[bool]> = records.iter().map(|r| r.mask64.as_slice()).collect();
    let codes = if masks.is_empty() { Vec::new() } else { codec.encode_masks(&masks)? };

    let mut ids = Vec::with_capacity(records.len() * RECORD_LEN + 1);
    let mut loss_mask = Vec::with_capacity(ids.capacity());
    for (rec, code) in records.iter().zip(&codes) {
        check_box(&rec.bbox)?;
        for t in quantize_box(&rec.bbox, vocab.n_bins)? {
            ids.push(vocab.id(Section::Coord, t)?);
            loss_mask.push(true);
        }
        let class = if rec.is_noise { vocab.background() } else { rec.class_id };
        if !rec.is_noise && class >= vocab.n_classes {
            return Err(Error::Index { op: "encode_instances", index: class, limit: vocab.n_classes });
        }
        ids.push(vocab.id(Section::Class, class)?);
        loss_mask.push(true);
        for &c in code {
            ids.push(vocab.id(Section::Mask, c)?);
            loss_mask.push(!rec.is_noise);
        }
    }
    ids.push(EOS);
    loss_mask.push(true);
    TokenSequence::new(Task::Ins, ids, loss_mask)
}

/// Renormalizes `full[range]` to a distribution; a slice with (almost) no
/// mass becomes one-hot at its argmax.
pub fn restrict_probs(full: &[f32], range: Range<usize>) -> Vec<f32> {
    let slice = &full[range];
    let mass: f64 = slice.iter().map(|&p| p.max(0.0) as f64).sum();
    if !(mass >= MIN_SLICE_MASS) {
        let mut out = vec![0.0; slice.len()];
        let best = slice.iter().enumerate().fold(0, |b, (i, &p)| if p > slice[b] { i } else { b });
        if !out.is_empty() {
            out[best] = 1.0;
        }
        return out;
    }
    slice.iter().map(|&p| (p.max(0.0) as f64 / mass) as f32).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodedInstance {
    pub instance: InstanceAnnotation,
    /// Probability of the class token, or 1 for hard sequences.
    pub score: f32,
    pub mask_tokens: Vec<usize>,
}

impl DecodedInstance {
    /// The 64×64 mask pasted into the predicted box on an `h×w` image.
    pub fn full_mask(&self, h: usize, w: usize) -> Vec<bool> {
        paste_mask(&self.instance.mask64, pixel_box(&self.instance.bbox, h, w), h, w)
    }
}

/// Parses records up to the first EOS (or the end). Background-class and
/// low-score records are dropped; survivors' masks are detokenized, from
/// renormalized mask-slice probabilities when the sequence carries them.
pub fn decode_instances(
    seq: &TokenSequence,
    vocab: &Vocabulary,
    codec: &dyn MaskCodec,
    score_threshold: f32,
) -> Result<Vec<DecodedInstance>> {
    let end = seq.ids.iter().position(|&t| t == EOS).unwrap_or(seq.ids.len());
    if end % RECORD_LEN != 0 {
        return Err(Error::Decode { offset: end, detail: format!("record truncated after {} tokens", end % RECORD_LEN) });
    }
    if let Some(p) = &seq.probs {
        if p.len() < end {
            return Err(Error::shape("decode_instances", format!("{} probability rows for {end} tokens", p.len())));
        }
    }
    let mut kept = Vec::new();
    let mut soft = Vec::new();
    for start in (0..end).step_by(RECORD_LEN) {
        let mut coords = [0usize; 4];
        for (k, c) in coords.iter_mut().enumerate() {
            *c = vocab.expect(seq.ids[start + k], Section::Coord, start + k)?;
        }
        let class = vocab.expect(seq.ids[start + 4], Section::Class, start + 4)?;
        let mask_tokens = (0..MASK_TOKENS)
            .map(|k| vocab.expect(seq.ids[start + 5 + k], Section::Mask, start + 5 + k))
            .collect::<Result<Vec<_>>>()?;
        let score = seq.probs.as_ref().map_or(1.0, |p| p[start + 4][seq.ids[start + 4]]);
        if class == vocab.background() || score < score_threshold {
            continue;
        }
        let b = dequantize_box(&coords, vocab.n_bins);
        let bbox = [b[0].min(b[2]), b[1].min(b[3]), b[0].max(b[2]), b[1].max(b[3])];
        let probs: Vec<f32> = match &seq.probs {
            Some(p) => (0..MASK_TOKENS).flat_map(|k| restrict_probs(&p[start + 5 + k], vocab.range(Section::Mask))).collect(),
            None => {
                let mut one_hot = vec![0.0; MASK_TOKENS * vocab.mask_codes];
                for (k, &t) in mask_tokens.iter().enumerate() {
                    one_hot[k * vocab.mask_codes + t] = 1.0;
                }
                one_hot
            }
        };
        soft.push(probs);
        kept.push((bbox, class, score, mask_tokens));
    }
    let masks = if soft.is_empty() { Vec::new() } else { codec.decode_masks_soft(&soft)? };
    Ok(kept
        .into_iter()
        .zip(masks)
        .map(|((bbox, class_id, score, mask_tokens), mask64)| DecodedInstance {
            instance: InstanceAnnotation { bbox, class_id, mask64, is_noise: false },
            score,
            mask_tokens,
        })
        .collect())
}

/// Row-major flattening into the depth-code section. Every position is
/// supervised; the length is fixed by the grid, so there is no EOS.
pub fn encode_depth(grid: &TokenGrid, vocab: &Vocabulary) -> Result<TokenSequence> {
    if grid.ids.len() != grid.h * grid.w {
        return Err(Error::shape("encode_depth", format!("{} ids for {}x{}", grid.ids.len(), grid.h, grid.w)));
    }
    let ids = grid.ids.iter().map(|&c| vocab.id(Section::Depth, c)).collect::<Result<Vec<_>>>()?;
    let n = ids.len();
    TokenSequence::new(Task::Dep, ids, vec![true; n])
}

pub fn decode_depth(seq: &TokenSequence, vocab: &Vocabulary, h: usize, w: usize) -> Result<TokenGrid> {
    if seq.ids.len() != h * w {
        return Err(Error::shape("decode_depth", format!("{} tokens for a {h}x{w} grid", seq.ids.len())));
    }
    let ids = seq.ids.iter().enumerate().map(|(i, &t)| vocab.expect(t, Section::Depth, i)).collect::<Result<Vec<_>>>()?;
    Ok(TokenGrid { h, w, ids })
}

/// Concatenated depth-slice distributions (`h·w` rows of `depth_codes`),
/// from the carried probabilities or one-hot rows of the ids.
pub fn depth_slice_probs(seq: &TokenSequence, vocab: &Vocabulary) -> Result<Vec<f32>> {
    let r = vocab.range(Section::Depth);
    match &seq.probs {
        Some(p) => {
            if p.len() != seq.ids.len() {
                return Err(Error::shape("depth_slice_probs", format!("{} rows for {} tokens", p.len(), seq.ids.len())));
            }
            Ok(p.iter().flat_map(|row| restrict_probs(row, r.clone())).collect())
        }
        None => {
            let mut out = vec![0.0; seq.ids.len() * r.len()];
            for (i, &t) in seq.ids.iter().enumerate() {
                out[i * r.len() + vocab.expect(t, Section::Depth, i)?] = 1.0;
            }
            Ok(out)
        }
    }
}
