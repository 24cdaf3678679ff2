use aitok_bench::scenes;
use aitok_core::metrics::{default_iou_thresholds, depth_metrics, mask_metrics, MaskInstance};
use aitok_core::scene::{gen_scene, SceneSpec};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn generate(c: &mut Criterion) {
    let spec = SceneSpec::default();
    let mut seed = 0;
    c.bench_function("gen_scene_64", |b| {
        b.iter(|| {
            seed += 1;
            black_box(gen_scene(&spec, seed).unwrap())
        })
    });
}

fn metrics(c: &mut Criterion) {
    let s = scenes(64, 2).unwrap();
    let (a, b) = (&s[0], &s[1]);
    let valid = vec![true; a.depth.values.len()];
    c.bench_function("depth_metrics_64", |bch| {
        bch.iter(|| black_box(depth_metrics(&a.depth.values, &b.depth.values, &valid).unwrap()))
    });
    let inst = |sc: &aitok_core::scene::SyntheticScene| -> Vec<MaskInstance> {
        sc.masks.iter().zip(&sc.instances).map(|(m, i)| MaskInstance { class_id: i.class_id, mask: m.clone() }).collect()
    };
    let (p, g) = (inst(a), inst(b));
    let th = default_iou_thresholds();
    c.bench_function("mask_metrics_64", |bch| bch.iter(|| black_box(mask_metrics(&p, &g, &th))));
}

criterion_group!(benches, generate, metrics);
criterion_main!(benches);
