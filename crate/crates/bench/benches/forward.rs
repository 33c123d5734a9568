use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use langedit_bench::{attention_inputs, editor, images, CAPTION};
use langedit_core::attention::word_context_features;
use langedit_core::generator::GeneratorMode;
use langedit_core::kernels::conv2d_same;
use langedit_core::nn::device;
use langedit_core::Tensor;

fn attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("word_context");
    // region counts of the three 64² scales
    for n in [64, 256, 1024] {
        let (v, w, u) = attention_inputs(8, 32, n, 256, 12).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| word_context_features(&v, &w, &u, None).unwrap())
        });
    }
    group.finish();
}

fn convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3");
    let x = Tensor::randn(0f32, 1.0, (8, 16, 32, 32), &device()).unwrap();
    let k = Tensor::randn(0f32, 0.1, (32, 16, 3, 3), &device()).unwrap();
    group.bench_function("fused", |b| b.iter(|| conv2d_same(&x, &k, 1).unwrap()));
    group.bench_function("candle", |b| b.iter(|| x.conv2d(&k, 1, 1, 1, 1).unwrap()));
    group.finish();
}

fn generator(c: &mut Criterion) {
    let mut group = c.benchmark_group("manipulate");
    group.sample_size(10);
    for mode in [GeneratorMode::Single, GeneratorMode::Multi] {
        let editor = editor(mode).unwrap();
        for batch in [1, 8] {
            let x = images(batch, 64).unwrap();
            let texts = vec![CAPTION; batch];
            group.bench_with_input(BenchmarkId::new(mode.to_string(), batch), &batch, |b, _| {
                b.iter(|| editor.manipulate(&x, &texts).unwrap())
            });
        }
    }
    group.finish();
}

fn text(c: &mut Criterion) {
    let editor = editor(GeneratorMode::Multi).unwrap();
    let texts = vec![CAPTION; 32];
    c.bench_function("encode_texts/32", |b| b.iter(|| editor.encode_texts(&texts).unwrap()));
}

criterion_group!(benches, attention, convolution, generator, text);
criterion_main!(benches);
