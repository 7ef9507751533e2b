use criterion::{criterion_group, criterion_main, Criterion};
use qcnn_bench::random_dataset;
use qcnn_core::model::encode_batch;
use qcnn_core::training::{backward_batch, Momentum, Objective};
use qcnn_core::{GradMode, QcnnConfig, QcnnModel};
use std::hint::black_box;

fn step(c: &mut Criterion) {
    let data = random_dataset(100, 7);
    let labels: Vec<usize> = (0..data.len()).map(|i| data.label(i)).collect();
    let mut g = c.benchmark_group("train_step_batch_100");
    g.sample_size(10);
    for (name, cfg) in [
        ("linear-1l", QcnnConfig::linear(1)),
        ("linear-3l", QcnnConfig::linear(3)),
        ("nonlinear-1l", QcnnConfig::nonlinear(1)),
        ("nonlinear-3l", QcnnConfig::nonlinear(3)),
    ] {
        let images: Vec<_> = (0..data.len()).map(|i| data.image(i).unwrap()).collect();
        let input = encode_batch(&cfg, images.iter()).unwrap();
        let obj = Objective::new(&cfg, GradMode::StraightThrough);
        let mut model = QcnnModel::init(&cfg, 0).unwrap();
        let mut velocity = Momentum::zeros_like(&model);
        g.bench_function(name, |b| {
            b.iter(|| {
                let cache = model.forward_states(input.clone(), cfg.feature_map(), true).unwrap();
                let grads = backward_batch(&model, &obj, &cache, &labels).unwrap();
                velocity.step(&mut model, &grads, 1e-3, 0.9).unwrap();
                black_box(grads.loss)
            })
        });
    }
    g.finish();
}

criterion_group!(benches, step);
criterion_main!(benches);
