use aitok_core::scene::{InstanceAnnotation, MASK_SIDE};
use aitok_core::seq::*;
use aitok_core::tokenizer::InterpolationTokenizer;
use aitok_core::tokenizer::{MaskCodec, TokenGrid};
use aitok_core::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// The nearest-neighbour codec is exact on 16×16-block masks and has a
// two-entry codebook, which makes token-level roundtrips checkable.
fn block_codec() -> (InterpolationTokenizer, Vocabulary) {
    (InterpolationTokenizer::for_masks(16), Vocabulary::new(2000, 3, 2, 128).unwrap())
}

fn block_mask(bits: u16) -> Vec<bool> {
    let mut m = vec![false; MASK_SIDE * MASK_SIDE];
    for y in 0..MASK_SIDE {
        for x in 0..MASK_SIDE {
            m[y * MASK_SIDE + x] = bits >> ((y / 16) * 4 + x / 16) & 1 == 1;
        }
    }
    m
}

fn instance(bbox: [f32; 4], class_id: usize, bits: u16) -> InstanceAnnotation {
    InstanceAnnotation::new(bbox, class_id, block_mask(bits)).unwrap()
}

fn arb_instance() -> impl Strategy<Value = InstanceAnnotation> {
    (0.0f32..1.0, 0.0f32..1.0, 0.0f32..1.0, 0.0f32..1.0, 0usize..3, any::<u16>()).prop_map(|(a, b, c, d, k, bits)| {
        instance([a.min(b), c.min(d), a.max(b), c.max(d)], k, bits)
    })
}

#[test]
fn vocabulary_layout() {
    let v = Vocabulary::default();
    assert_eq!(v.range(Section::Special), 0..4);
    assert_eq!(v.range(Section::Coord), 4..2004);
    assert_eq!(v.range(Section::Class), 2004..2008);
    assert_eq!(v.id(Section::Class, v.background()).unwrap(), 2007);
    assert_eq!(v.range(Section::Mask), 2008..2136);
    assert_eq!(v.range(Section::Depth), 2136..2264);
    assert_eq!(v.size(), 2264);
    assert!(v.id(Section::Coord, 2000).is_err());
    assert_eq!(v.locate(2264), None);
    assert_eq!(v.locate(EOS), Some((Section::Special, 1)));
}

proptest! {
    #[test]
    fn vocabulary_is_a_bijection(bins in 1usize..50, classes in 0usize..6, m in 1usize..20, d in 1usize..20) {
        let v = Vocabulary::new(bins, classes, m, d).unwrap();
        let mut seen = 0;
        for id in 0..v.size() {
            let (s, o) = v.locate(id).unwrap();
            prop_assert_eq!(v.id(s, o).unwrap(), id);
            seen += 1;
        }
        prop_assert_eq!(seen, 4 + bins + classes + 1 + m + d);
    }

    #[test]
    fn box_roundtrip_within_half_bin(b in prop::array::uniform4(0.0f32..=1.0)) {
        let back = dequantize_box(&quantize_box(&b, 2000).unwrap(), 2000);
        for i in 0..4 {
            prop_assert!((back[i] - b[i]).abs() <= 0.00025 + 1e-6, "{} -> {}", b[i], back[i]);
        }
    }

    #[test]
    fn instance_codec_roundtrips(insts in prop::collection::vec(arb_instance(), 0..5), n_noise in 0usize..4, seed in any::<u64>()) {
        let (codec, vocab) = block_codec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let seq = encode_instances(&insts, &vocab, &codec, n_noise, &mut rng).unwrap();
        prop_assert_eq!(seq.len(), (insts.len() + n_noise) * RECORD_LEN + 1);
        seq.check(&vocab).unwrap();

        // loss is masked exactly on the noise records' mask codes
        for (i, &m) in seq.loss_mask.iter().enumerate() {
            let rec = i / RECORD_LEN;
            let noise_mask_pos = i < seq.len() - 1 && rec >= insts.len() && i % RECORD_LEN >= 5;
            prop_assert_eq!(m, !noise_mask_pos);
        }

        let out = decode_instances(&seq, &vocab, &codec, 0.0).unwrap();
        prop_assert_eq!(out.len(), insts.len());
        let mut matched = vec![false; insts.len()];
        for d in &out {
            let hit = insts.iter().enumerate().position(|(k, t)| {
                !matched[k]
                    && t.class_id == d.instance.class_id
                    && t.mask64 == d.instance.mask64
                    && (0..4).all(|j| (t.bbox[j] - d.instance.bbox[j]).abs() <= 0.00025 + 1e-6)
            });
            prop_assert!(hit.is_some(), "{:?}", d.instance.bbox);
            matched[hit.unwrap()] = true;
            let expect = codec.encode_masks(&[d.instance.mask64.as_slice()]).unwrap();
            prop_assert_eq!(&d.mask_tokens, &expect[0]);
        }
    }

    #[test]
    fn depth_codec_is_an_inverse_pair(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let vocab = Vocabulary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = (0..h * w).map(|_| rand::Rng::random_range(&mut rng, 0..128)).collect();
        let grid = TokenGrid { h, w, ids };
        let seq = encode_depth(&grid, &vocab).unwrap();
        prop_assert_eq!(decode_depth(&seq, &vocab, h, w).unwrap(), grid.clone());
        prop_assert_eq!(encode_depth(&decode_depth(&seq, &vocab, h, w).unwrap(), &vocab).unwrap(), seq);
    }
}

#[test]
fn box_quantization_examples() {
    assert_eq!(quantize_box(&[0.0, 1.0, 0.5, 1.0], 2000).unwrap(), [0, 1999, 1000, 1999]);
    assert!((dequantize_box(&[1000; 4], 2000)[0] - 0.50025).abs() < 1e-7);
    assert!(quantize_box(&[0.0, 0.0, 1.0 + 5e-7, 1.0], 2000).is_ok());
    assert!(quantize_box(&[0.0, 0.0, 1.01, 1.0], 2000).is_err());
    assert!(quantize_box(&[-0.01, 0.0, 1.0, 1.0], 2000).is_err());
}

#[test]
fn instance_sequence_lengths_and_noise() {
    let (codec, vocab) = block_codec();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let two = [instance([0.1, 0.1, 0.5, 0.5], 0, 0xF0F0), instance([0.2, 0.3, 0.9, 0.8], 2, 0x0001)];
    assert_eq!(encode_instances(&two, &vocab, &codec, 0, &mut rng).unwrap().len(), 43);

    let empty = encode_instances(&[], &vocab, &codec, 0, &mut rng).unwrap();
    assert_eq!(empty.ids, [EOS]);
    assert_eq!(empty.loss_mask, [true]);

    let seq = encode_instances(&two[..1], &vocab, &codec, 1, &mut rng).unwrap();
    assert_eq!(seq.loss_mask.iter().filter(|&&m| !m).count(), 16);
    assert_eq!(seq.ids[RECORD_LEN + 4], vocab.id(Section::Class, vocab.background()).unwrap());
    // the noise record's mask codes encode an empty mask
    let zero = codec.encode_masks(&[&vec![false; MASK_SIDE * MASK_SIDE]]).unwrap();
    let got: Vec<usize> = seq.ids[RECORD_LEN + 5..2 * RECORD_LEN].iter().map(|&t| t - vocab.range(Section::Mask).start).collect();
    assert_eq!(got, zero[0]);
}

#[test]
fn real_instance_order_is_seeded() {
    let (codec, vocab) = block_codec();
    let insts: Vec<_> = (0..6).map(|k| instance([0.0, 0.0, 0.1 * (k + 1) as f32, 0.5], k % 3, 1)).collect();
    let enc = |seed| encode_instances(&insts, &vocab, &codec, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    assert_eq!(enc(4), enc(4));
    assert!((0..8).any(|s| enc(s) != enc(4)));
}

#[test]
fn mask_codec_grid_must_hold_sixteen_tokens() {
    let vocab = Vocabulary::new(2000, 3, 2, 128).unwrap();
    let codec = InterpolationTokenizer::for_masks(8);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(encode_instances(&[], &vocab, &codec, 0, &mut rng), Err(Error::Config(_))));
}

#[test]
fn decode_drops_background_and_reports_offsets() {
    let (codec, vocab) = block_codec();
    let bg = vocab.id(Section::Class, vocab.background()).unwrap();
    let coord = vocab.id(Section::Coord, 10).unwrap();
    let code = vocab.id(Section::Mask, 0).unwrap();
    let mut rec = vec![coord; 4];
    rec.push(bg);
    rec.extend([code; 16]);
    let mut ids = rec.clone();
    ids.push(EOS);
    let seq = TokenSequence::new(Task::Ins, ids.clone(), vec![true; ids.len()]).unwrap();
    assert!(decode_instances(&seq, &vocab, &codec, 0.0).unwrap().is_empty());

    let short = TokenSequence::new(Task::Ins, rec[..20].to_vec(), vec![true; 20]).unwrap();
    match decode_instances(&short, &vocab, &codec, 0.0) {
        Err(Error::Decode { offset, .. }) => assert_eq!(offset, 20),
        other => panic!("{other:?}"),
    }

    let mut wrong = rec.clone();
    wrong[7] = coord; // a coordinate where a mask code belongs
    let seq = TokenSequence::new(Task::Ins, wrong, vec![true; 21]).unwrap();
    match decode_instances(&seq, &vocab, &codec, 0.0) {
        Err(Error::Decode { offset, .. }) => assert_eq!(offset, 7),
        other => panic!("{other:?}"),
    }

    let mut out_of_range = rec;
    out_of_range[0] = vocab.size();
    let seq = TokenSequence::new(Task::Ins, out_of_range, vec![true; 21]).unwrap();
    assert!(matches!(seq.check(&vocab), Err(Error::Decode { offset: 0, .. })));
    assert!(decode_instances(&seq, &vocab, &codec, 0.0).is_err());
}

#[test]
fn decode_uses_carried_probabilities() {
    let (codec, vocab) = block_codec();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let inst = instance([0.25, 0.25, 0.75, 0.75], 1, 0xFFFF);
    let mut seq = encode_instances(std::slice::from_ref(&inst), &vocab, &codec, 0, &mut rng).unwrap();
    // distributions that put most mass on coordinate tokens but prefer code 0
    // (empty block) inside the mask slice: soft decoding must follow the slice
    let mask_r = vocab.range(Section::Mask);
    let probs: Vec<Vec<f32>> = seq
        .ids
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut p = vec![0.0f32; vocab.size()];
            if (5..RECORD_LEN).contains(&i) {
                p[4] = 0.9;
                p[mask_r.start] = 0.07;
                p[mask_r.start + 1] = 0.03;
            } else {
                p[t] = 0.6;
                p[0] = 0.4;
            }
            p
        })
        .collect();
    seq.probs = Some(probs);
    let out = decode_instances(&seq, &vocab, &codec, 0.5).unwrap();
    assert_eq!(out.len(), 1);
    assert!((out[0].score - 0.6).abs() < 1e-6);
    assert!(out[0].instance.mask64.iter().all(|&b| !b));
    assert!(decode_instances(&seq, &vocab, &codec, 0.7).unwrap().is_empty());
}

#[test]
fn depth_sequence_lengths() {
    let vocab = Vocabulary::default();
    for (side, ratio, len) in [(64, 16, 16), (480, 32, 225)] {
        let g = side / ratio;
        let seq = encode_depth(&TokenGrid { h: g, w: g, ids: vec![3; g * g] }, &vocab).unwrap();
        assert_eq!(seq.len(), len);
        assert!(seq.loss_mask.iter().all(|&m| m));
    }
    let seq = encode_depth(&TokenGrid { h: 4, w: 4, ids: vec![0; 16] }, &vocab).unwrap();
    assert!(decode_depth(&seq, &vocab, 4, 3).is_err());
    assert!(encode_depth(&TokenGrid { h: 4, w: 4, ids: vec![128; 16] }, &vocab).is_err());
}

#[test]
fn restrict_probs_examples() {
    let mut full = vec![0.0f32; 10];
    full[4] = 0.25;
    full[5] = 0.75;
    assert_eq!(restrict_probs(&full, 3..7), [0.0, 0.25, 0.75, 0.0]);

    let uniform = vec![0.1f32; 10];
    let r = restrict_probs(&uniform, 2..6);
    assert!(r.iter().all(|&p| (p - 0.25).abs() < 1e-6));

    let mut adversarial = vec![0.0f32; 10];
    adversarial[0] = 1.0;
    adversarial[7] = 1e-12;
    let r = restrict_probs(&adversarial, 5..9);
    assert_eq!(r, [0.0, 0.0, 1.0, 0.0]);
    assert!(aitok_core::vq::is_distribution(&r, 1e-6));
}

#[test]
fn depth_slice_probs_from_ids_and_probs() {
    let vocab = Vocabulary::new(10, 1, 2, 3).unwrap();
    let mut seq = encode_depth(&TokenGrid { h: 1, w: 2, ids: vec![2, 0] }, &vocab).unwrap();
    assert_eq!(depth_slice_probs(&seq, &vocab).unwrap(), [0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let d = vocab.range(Section::Depth).start;
    let mut row = vec![0.0f32; vocab.size()];
    row[d] = 0.2;
    row[d + 1] = 0.2;
    row[0] = 0.6;
    seq.probs = Some(vec![row.clone(), row]);
    let p = depth_slice_probs(&seq, &vocab).unwrap();
    assert!((p[0] - 0.5).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6 && p[2] == 0.0);
}

#[test]
fn sequences_serialize_as_json_lines() {
    let seq = TokenSequence::new(Task::Dep, vec![2140, 2141], vec![true, false]).unwrap();
    let line = seq.to_json_line().unwrap();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["task"], "dep");
    assert_eq!(v["ids"], serde_json::json!([2140, 2141]));
    assert_eq!(TokenSequence::from_json_line(&line).unwrap(), seq);
    assert!(TokenSequence::from_json_line(r#"{"task":"ins","ids":[1],"loss_mask":[]}"#).is_err());
}
