use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spinn_core::autodiff::{Tape, Tensor};
use spinn_core::models::{Architecture, Forecaster, ForwardMode, ModelConfig};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn matmul(c: &mut Criterion) {
    let a = random(&[64, 168], 1);
    let b = random(&[168, 168], 2);
    c.bench_function("matmul_64x168x168_backward", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let av = t.param("a", a.clone());
            let bv = t.param("b", b.clone());
            let y = t.matmul(av, bv).unwrap();
            let loss = t.sum(y);
            black_box(t.backward(loss).unwrap());
        })
    });
}

fn conv(c: &mut Criterion) {
    let x = random(&[8, 1, 48, 3], 3);
    let w = random(&[4, 1, 3, 3], 4);
    let b = random(&[4], 5);
    c.bench_function("conv2d_8x1x48x3_backward", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.param("w", w.clone());
            let bv = t.param("b", b.clone());
            let y = t.conv2d(xv, wv, bv, (1, 1)).unwrap();
            let loss = t.sum(y);
            black_box(t.backward(loss).unwrap());
        })
    });
}

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model_step");
    group.sample_size(20);
    for (label, config) in [
        ("nlinear_168", ModelConfig::new(Architecture::NLinear)),
        (
            "lstm_48_h8",
            ModelConfig {
                m_in: 48,
                m_out: 48,
                hidden: 8,
                ..ModelConfig::new(Architecture::Lstm)
            },
        ),
    ] {
        let model = Forecaster::new(config.clone(), 0).unwrap();
        let x = random(&[64, config.m_in, config.n_features], 6);
        group.bench_function(label, |bench| {
            bench.iter(|| {
                let mut t = Tape::new();
                let vars = model.record(&mut t);
                let xv = t.constant(x.clone());
                let (y, _) = model
                    .forward_with(&mut t, &vars, xv, ForwardMode::Train)
                    .unwrap();
                let loss = t.mean(y).unwrap();
                black_box(t.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

criterion_group!(benches, matmul, conv, forward_backward);
criterion_main!(benches);
