use adanorm_core::experiments::{prepare_splits, SensorBenchmark};
use adanorm_core::models::{build_model, Mode, ModelConfig};
use adanorm_core::normalization::{normalize, StatsSource};
use adanorm_core::optim::{train_step, AdamState};
use adanorm_core::{Averaging, NormSpec, PaddingMode, Statistic, Tape, Tensor};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn ramp(shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i * 7919) % 1000) as f32 / 500.0 - 1.0)
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[32, 16, 64]);
    let w = ramp(&[16, 16, 3]);
    let b = ramp(&[16]);
    c.bench_function("conv1d 32x16x64 k3", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.leaf(x.clone()), tape.leaf(w.clone()), tape.leaf(b.clone()));
            let y = tape.conv(xv, wv, bv, &[1], &[1], PaddingMode::Zero).unwrap();
            let l = tape.sum(y);
            black_box(tape.backward(l).unwrap());
        })
    });
}

fn norm(c: &mut Criterion) {
    let x = ramp(&[32, 16, 64]);
    let gamma = vec![1.0f32; 16];
    let beta = vec![0.0f32; 16];
    for averaging in [Averaging::Batch, Averaging::Instance] {
        c.bench_function(&format!("normalize {averaging} 32x16x64"), |bench| {
            bench.iter(|| {
                black_box(
                    normalize(&x, &gamma, &beta, Statistic::MeanStd, 1e-5, StatsSource::Compute(averaging)).unwrap(),
                )
            })
        });
    }
}

fn model(c: &mut Criterion) {
    let bench = SensorBenchmark::default();
    let cfg: ModelConfig = bench.model_config(NormSpec::batch_norm(), 0);
    let mut m = build_model::<f32>(&cfg).unwrap();
    let splits = prepare_splits(&bench, 0.8, 0).unwrap();
    let batch: Vec<usize> = (0..32).collect();
    let (x, _) = splits.train.batch::<f32>(&batch);
    c.bench_function("sensor forward adaptive eval batch 32", |b| {
        b.iter(|| black_box(m.predict(x.clone(), Mode::EvalAdaptive).unwrap()))
    });
    let mut adam = AdamState::new(m.params());
    c.bench_function("sensor train step batch 32", |b| {
        b.iter(|| black_box(train_step(&mut m, &mut adam, &splits.train, &batch, 1e-3).unwrap()))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, norm, model
}
criterion_main!(benches);
