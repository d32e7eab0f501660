use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ffrt::ewtb::{ewtb_forward, EwtbConfig, EwtbParams};
use ffrt::network::{predict, ModelConfig, ModelParams};
use ffrt::numerics::{kernels, ConvSpec, Tape, Tensor};
use ffrt::wavelet::{dwt2, idwt2};

/// Deterministic pseudo-random fill without pulling in an RNG.
fn filled(shape: [usize; 4], salt: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i as f64 + salt) * 0.618_034).sin()).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for ch in [16, 32] {
        let x = filled([1, ch, 32, 32], 1.0);
        let w = filled([ch, ch, 3, 3], 2.0);
        g.bench_with_input(BenchmarkId::from_parameter(ch), &ch, |b, _| {
            b.iter(|| kernels::conv2d(black_box(&x), &w, None, ConvSpec::new(1, 1, 1)).unwrap())
        });
    }
    g.finish();
}

fn wavelet(c: &mut Criterion) {
    let x = filled([1, 32, 64, 64], 3.0);
    c.bench_function("dwt2_idwt2_32x64x64", |b| {
        b.iter(|| idwt2(&dwt2(black_box(&x)).unwrap()).unwrap())
    });
}

fn block(c: &mut Criterion) {
    let cfg = EwtbConfig::new(32, 4, 4, 32).unwrap();
    let p = EwtbParams::zeros(cfg);
    let x = filled([1, 32, 16, 16], 4.0);
    let y = filled([1, 32, 8, 8], 5.0);
    c.bench_function("ewtb_forward_32x16x16", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let bound = p.values.bind(&tape, false);
            let out = ewtb_forward(tape.constant(x.clone()), Some(tape.constant(y.clone())), &bound.scope(""), &cfg)
                .unwrap();
            black_box(out.value());
        })
    });
}

fn model(c: &mut Criterion) {
    let params = ModelParams::zeros(ModelConfig::tiny()).unwrap();
    let img = filled([1, 3, 64, 64], 6.0).map(|v| 0.5 + 0.5 * v);
    let mut g = c.benchmark_group("model");
    g.sample_size(10);
    g.bench_function("predict_tiny_64", |b| b.iter(|| predict(&params, black_box(&img)).unwrap()));
    g.finish();
}

criterion_group!(benches, conv, wavelet, block, model);
criterion_main!(benches);
