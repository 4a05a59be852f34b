//! Criterion benchmarks for the hot paths: the matmul kernel, masked
//! attention softmax, a full expert-stack forward at desk dimensions, and
//! sentence-level metric scoring. Sample counts are kept small; these are
//! trend detectors, not microsecond-precise measurements.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use v2d_bench::filled;
use v2d_core::data::split_text;
use v2d_core::eval::nlg::{bleu, cider};
use v2d_core::experts::{ExpertStack, ModalityBundle, StackConfig, StreamId};
use v2d_core::rng::seeded;
use v2d_core::tensor::ops;
use v2d_core::vision::spatial_mask;

fn bench_matmul(c: &mut Criterion) {
    let a = filled(&[64, 64]);
    let b = filled(&[64, 64]);
    let a256 = filled(&[256, 256]);
    let b256 = filled(&[256, 256]);
    let mut g = c.benchmark_group("matmul");
    g.sample_size(30);
    g.bench_function("64x64", |bench| {
        bench.iter(|| ops::matmul(black_box(&a), black_box(&b)).unwrap())
    });
    g.bench_function("256x256", |bench| {
        bench.iter(|| ops::matmul(black_box(&a256), black_box(&b256)).unwrap())
    });
    g.finish();
}

fn bench_masked_softmax(c: &mut Criterion) {
    // scores over the visual token grid at paper-adjacent size: 8 frames
    // of 16 patches = 128 rows
    let mask = spatial_mask(8, 16);
    let scores = filled(&[128, 128]);
    let mut g = c.benchmark_group("masked_softmax");
    g.sample_size(30);
    g.bench_function("128x128_spatial", |bench| {
        bench.iter(|| ops::masked_softmax_rows(black_box(&scores), black_box(&mask)).unwrap())
    });
    g.finish();
}

fn bench_stack_forward(c: &mut Criterion) {
    let cfg = StackConfig {
        layers: 4,
        expert_layers: 3,
        dim: 64,
        heads: 4,
        ffn_multiplier: 4,
    };
    let stack: ExpertStack<f32> = ExpertStack::new(&mut seeded(9), &cfg, true, true).unwrap();
    let bundle = ModalityBundle::new(vec![
        (StreamId::Spa, filled(&[16, 64])),
        (StreamId::Tmp, filled(&[16, 64])),
        (StreamId::Cap, filled(&[8, 64])),
        (StreamId::Ctx, filled(&[12, 64])),
    ])
    .unwrap();
    let mut g = c.benchmark_group("expert_stack");
    g.sample_size(20);
    g.measurement_time(Duration::from_secs(8));
    g.bench_function("forward_desk_video", |bench| {
        bench.iter(|| stack.forward(black_box(&bundle)).unwrap())
    });
    g.finish();
}

fn bench_metrics(c: &mut Criterion) {
    let cand = split_text("the small red square moves slowly to the right side");
    let refs = vec![split_text("a small red square drifts right across the frame")];
    let corpus_c: Vec<Vec<String>> = (0..64)
        .map(|i| split_text(&format!("sample {i} shows a red square moving right")))
        .collect();
    let corpus_r: Vec<Vec<Vec<String>>> = (0..64)
        .map(|i| vec![split_text(&format!("clip {i} has a red square going right"))])
        .collect();
    let mut g = c.benchmark_group("metrics");
    g.sample_size(40);
    g.bench_function("bleu4_sentence", |bench| {
        bench.iter(|| bleu(black_box(&cand), black_box(&refs), 4).unwrap())
    });
    g.bench_function("cider_64_samples", |bench| {
        bench.iter(|| cider(black_box(&corpus_c), black_box(&corpus_r)).unwrap())
    });
    g.finish();
}

criterion_group!(
    kernels,
    bench_matmul,
    bench_masked_softmax,
    bench_stack_forward,
    bench_metrics
);
criterion_main!(kernels);
