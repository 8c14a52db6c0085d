use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use srseg::autodiff::BnMode;
use srseg::data::generate_dataset;
use srseg::losses::{weighted_objective, TermCoefficients};
use srseg::train::{evaluate, Toggles};
use srseg::{DatasetConfig, LossWeights, Model, ModelConfig, Tape};
use srseg_bench::{random_tensor, synthetic_batch};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    for (cin, cout, size) in [(3, 8, 64), (16, 32, 16), (32, 32, 8)] {
        let x = random_tensor::<f32>(&[8, cin, size, size], 0);
        let w = random_tensor::<f32>(&[cout, cin, 3, 3], 1);
        let id = format!("{cin}x{size}x{size}->{cout}");
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
                t.conv2d(xv, wv, None, 1, 1).unwrap()
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |b, _| {
            b.iter(|| {
                let mut t = Tape::new();
                let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
                let y = t.conv2d(xv, wv, None, 1, 1).unwrap();
                let l = t.sum(y);
                t.backward(l).unwrap();
            })
        });
    }
    group.finish();
}

fn resize_and_softmax(c: &mut Criterion) {
    let x = random_tensor::<f32>(&[8, 4, 16, 16], 2);
    c.bench_function("bilinear_upsample 16->64", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            t.bilinear_upsample(xv, 64, 64).unwrap()
        })
    });
    let logits = random_tensor::<f32>(&[8, 4, 64, 64], 3);
    c.bench_function("channel_log_softmax 8x4x64x64", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(logits.clone());
            t.channel_log_softmax(xv).unwrap()
        })
    });
}

fn training_step(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::build(&cfg, 0).unwrap();
    let batch = synthetic_batch::<f32>(&cfg, 8);
    let mut group = c.benchmark_group("objective_forward_backward");
    group.sample_size(10);
    for toggles in [Toggles::BASELINE, Toggles::FULL] {
        let coef = TermCoefficients::for_toggles(&LossWeights::default(), toggles);
        group.bench_function(toggles.label(), |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let params = model.bind(&mut tape);
                let x = tape.constant(batch.images.clone());
                let (pass, _) = model.forward_with(&mut tape, &params, x, BnMode::Train).unwrap();
                let g = weighted_objective(&mut tape, &pass.bundles, &batch.mask, &batch.labels, &coef, 1.0).unwrap();
                tape.backward(g.total).unwrap();
            })
        });
    }
    group.finish();

    let eval = generate_dataset(&DatasetConfig {
        count: 32,
        ..DatasetConfig::default()
    });
    let stripped = model.strip_exits();
    let mut group = c.benchmark_group("evaluate_32_images");
    group.sample_size(10);
    group.bench_function("with_exits", |b| b.iter(|| evaluate(&model, &eval, 8).unwrap()));
    group.bench_function("stripped", |b| b.iter(|| evaluate(&stripped, &eval, 8).unwrap()));
    group.finish();
}

criterion_group!(benches, conv, resize_and_softmax, training_step);
criterion_main!(benches);
