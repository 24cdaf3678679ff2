use aitok_bench::{depth_tokenizer, scenes, toy_solver};
use aitok_core::seq::Task;
use aitok_core::solver::{infer, DecodeMode, DecodeOptions, SolverDataset, Tokenizers};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn decode(c: &mut Criterion) {
    let tok = depth_tokenizer().unwrap();
    let model = toy_solver().unwrap();
    let data = SolverDataset::from_scenes(&scenes(32, 8).unwrap(), Some(&tok), false).unwrap();
    let images = data.images(&(0..8).collect::<Vec<_>>()).unwrap();
    let toks = Tokenizers { depth: Some(&tok), mask: None };
    let hard = DecodeOptions::default();
    let mut group = c.benchmark_group("depth_decode_batch8");
    for (name, opts) in [
        ("hard", hard),
        ("soft", DecodeOptions { mode: DecodeMode::Soft, ..hard }),
        ("soft_detokenize", DecodeOptions { mode: DecodeMode::Soft, soft_detokenize: true, ..hard }),
        ("parallel", DecodeOptions { parallel: true, ..hard }),
    ] {
        group.bench_function(name, |b| b.iter(|| black_box(infer(&model, &images, Task::Dep, &opts, &toks).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, decode);
criterion_main!(benches);
