use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use metaformer_bench::random_tensor;
use metaformer_core::activations::{ActivationSpec, StarVariant};
use metaformer_core::layers::Filler;
use metaformer_core::mixers::{attention_mixer, random_mixer, AttentionParams, RandomMixingMatrix};
use metaformer_core::tensor::{conv2d, layernorm, matmul, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256, 512] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.throughput(Throughput::Elements((n * n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn bench_conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    let x = random_tensor(&[1, 3, 224, 224], 3);
    let w = random_tensor(&[64, 3, 7, 7], 4);
    group.bench_function("stem_7x7_s4", |b| b.iter(|| conv2d(black_box(&x), &w, None, 4, 2, 1).unwrap()));
    let x = random_tensor(&[1, 128, 56, 56], 5);
    let w = random_tensor(&[128, 1, 7, 7], 6);
    group.bench_function("depthwise_7x7_128x56x56", |b| {
        b.iter(|| conv2d(black_box(&x), &w, None, 1, 3, 128).unwrap())
    });
    let x = random_tensor(&[1, 64, 56, 56], 7);
    let w = random_tensor(&[128, 64, 3, 3], 8);
    group.bench_function("downsample_3x3_s2", |b| b.iter(|| conv2d(black_box(&x), &w, None, 2, 1, 1).unwrap()));
    group.finish();
}

fn bench_mixers(c: &mut Criterion) {
    let mut group = c.benchmark_group("mixers");
    let x = random_tensor(&[1, 196, 320], 9);
    let p = AttentionParams::new(&Filler::Seeded(1), "mixer", 320, 32, false);
    group.bench_function("attention_196x320", |b| b.iter(|| attention_mixer(black_box(&x), &p).unwrap()));
    let m = RandomMixingMatrix::new(196, 2);
    group.bench_function("random_mixing_196x320", |b| b.iter(|| random_mixer(black_box(&x), &m).unwrap()));
    group.finish();
}

fn bench_elementwise(c: &mut Criterion) {
    let mut group = c.benchmark_group("elementwise");
    let x = random_tensor(&[3136, 256], 10);
    group.throughput(Throughput::Elements(x.numel() as u64));
    for spec in [ActivationSpec::gelu(), ActivationSpec::star_relu(StarVariant::LearnableScaleAndBias)] {
        group.bench_function(spec.label(), |b| b.iter(|| spec.apply(black_box(&x))));
    }
    let gamma = Tensor::ones(&[256]);
    group.bench_function("layernorm", |b| b.iter(|| layernorm(black_box(&x), &gamma, None, 1e-6).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_matmul, bench_conv, bench_mixers, bench_elementwise);
criterion_main!(benches);
