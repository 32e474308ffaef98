use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use spinn_bench::synthetic;
use spinn_core::cee::{cee_predict, CalibratedEquation, CeeWindow};
use spinn_core::models::{Architecture, Forecaster, ModelConfig};
use spinn_core::physics::{EquationVariant, PhysicsParams};
use spinn_core::training::{evaluate, train, Method, TrainConfig, TrainData};

fn epoch(c: &mut Criterion) {
    let f = synthetic(2000, 168, 168);
    let data = TrainData {
        train: &f.split.train,
        val: &f.split.val,
        scaler: &f.scaler,
        bridges: &f.bridges,
    };
    let mut group = c.benchmark_group("train_epoch");
    group.sample_size(10);
    for method in [Method::Pure, Method::Spinn(EquationVariant::Td)] {
        let mut cfg = TrainConfig::new(method, 0);
        cfg.epochs = 1;
        let model = Forecaster::new(ModelConfig::new(Architecture::NLinear), 0).unwrap();
        group.bench_function(format!("nlinear_{}", method.label()), |bench| {
            bench.iter(|| black_box(train(model.clone(), &data, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn inference(c: &mut Criterion) {
    let f = synthetic(2000, 168, 168);
    let model = Forecaster::new(ModelConfig::new(Architecture::NLinear), 0).unwrap();
    c.bench_function("evaluate_nlinear_test_split", |bench| {
        bench.iter(|| black_box(evaluate(&model, &f.scaler, &f.split.test).unwrap()))
    });

    let bridge = f.bridges.values().next().unwrap();
    let eq = CalibratedEquation::from_params(
        bridge.id.clone(),
        EquationVariant::Td,
        &PhysicsParams {
            p1: 0.5,
            p2: 0.9,
            p3: 0.9,
            t_l: 24.0,
            ..PhysicsParams::unit()
        },
    );
    let windows: Vec<CeeWindow> = (0..200)
        .map(|k| CeeWindow {
            start: k,
            e_ref: bridge.as_built_elevation,
            y1: (0..168).map(|t| 1.0 + 0.01 * t as f64).collect(),
            q: (0..168).map(|t| 100.0 + t as f64).collect(),
        })
        .collect();
    c.bench_function("cee_predict_200_windows", |bench| {
        bench.iter(|| black_box(cee_predict(&eq, bridge, &windows).unwrap()))
    });
}

criterion_group!(benches, epoch, inference);
criterion_main!(benches);
