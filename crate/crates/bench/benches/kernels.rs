use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use sgtpact::quant::{self, PactLayerState, WeightQuantConfig};
use sgtpact::train::{self, model_config};
use sgtpact::{build_model, DatasetKind, ForwardMode, Tape, Tensor, TrainConfig, TrainMode};

fn filled(shape: &[usize], scale: f32) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i * 7919 % 1000) as f32 / 500.0 - 1.0) * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn conv(c: &mut Criterion) {
    let x = filled(&[32, 1, 28, 28], 1.0);
    let k = filled(&[8, 1, 3, 3], 0.3);
    c.bench_function("conv2d forward+backward 32x1x28x28 -> 8", |b| {
        b.iter(|| {
            let mut tape = Tape::<f32>::new();
            let xv = tape.leaf(x.clone());
            let kv = tape.leaf(k.clone());
            let y = tape.conv2d(xv, kv, 1, 1).unwrap();
            let s = tape.sum(y);
            black_box(tape.backward(s).unwrap());
        })
    });
}

fn quantizers(c: &mut Criterion) {
    let x = filled(&[65536], 12.0);
    let state = PactLayerState::with_alpha(6.0, 4);
    c.bench_function("pact_forward 64k k=4", |b| b.iter(|| black_box(quant::pact_forward(&x, &state).unwrap())));
    let w = filled(&[65536], 0.5);
    c.bench_function("quantize_weights 64k k=8", |b| {
        b.iter(|| {
            let cfg = WeightQuantConfig::from_tensor(&w, 8).unwrap();
            black_box(quant::quantize_weights(&w, &cfg).unwrap())
        })
    });
}

fn model(c: &mut Criterion) {
    let cfg = TrainConfig::defaults_for(DatasetKind::Mnist);
    let m = build_model(&model_config(DatasetKind::Mnist, &cfg), 0).unwrap();
    let x = filled(&[128, 1, 28, 28], 1.0);
    let y: Vec<usize> = (0..128).map(|i| i % 10).collect();
    c.bench_function("forward quantized batch 128", |b| {
        b.iter(|| black_box(m.forward(&x, ForwardMode::Quantized).unwrap()))
    });
    let mut group = c.benchmark_group("train_step batch 128");
    group.sample_size(10);
    for mode in [TrainMode::PactOnly, TrainMode::SgtPact] {
        let cfg = TrainConfig { mode, ..cfg.clone() };
        let m = build_model(&model_config(DatasetKind::Mnist, &cfg), 0).unwrap();
        group.bench_function(mode.to_string(), |b| {
            b.iter_batched(
                || m.clone(),
                |mut m| black_box(train::train_step(&mut m, &x, &y, &cfg, [0, 0]).unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, conv, quantizers, model);
criterion_main!(benches);
