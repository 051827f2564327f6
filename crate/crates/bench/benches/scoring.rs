use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use prada_core::autodiff::{loss_and_grad, LossSettings, Sample};
use prada_core::{auroc, builtin_profile, calibrate, generate, CalibrationConfig, InputMode};

fn fixtures() -> (
    Vec<prada_core::TokenLikelihoodRecord>,
    Vec<prada_core::TokenLikelihoodRecord>,
) {
    generate(&builtin_profile("var-like").unwrap(), 300, 300).unwrap()
}

fn model(mode: InputMode) -> prada_core::ScoreModel {
    let (real, fake) = fixtures();
    let config = CalibrationConfig {
        steps: 50,
        mode,
        ..CalibrationConfig::default()
    };
    calibrate(&real, &fake, &config).unwrap()
}

fn scoring(c: &mut Criterion) {
    let (real, _) = fixtures();
    for mode in [InputMode::Ratio1d, InputMode::Pair2d] {
        let m = model(mode);
        c.bench_function(&format!("prada_score/{mode:?}/66_tokens"), |b| {
            b.iter(|| m.score(black_box(&real[0])).unwrap())
        });
    }
}

fn gradient(c: &mut Criterion) {
    let (real, fake) = fixtures();
    let m = model(InputMode::Ratio1d);
    let batch: Vec<Sample<'_>> = real
        .iter()
        .take(32)
        .map(|r| Sample {
            record: r,
            target: 0.0,
        })
        .chain(fake.iter().take(32).map(|r| Sample {
            record: r,
            target: 1.0,
        }))
        .collect();
    let settings = LossSettings {
        label_smoothing: 0.1,
        weight_penalty: 1e-2,
    };
    c.bench_function("loss_and_grad/batch_64", |b| {
        b.iter(|| loss_and_grad(&m, black_box(&batch), &settings, None).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let scores: Vec<f64> = (0..10_000)
        .map(|i| ((i * 7919) % 1000) as f64 / 10.0)
        .collect();
    let labels: Vec<bool> = (0..10_000).map(|i| i % 3 == 0).collect();
    c.bench_function("auroc/10k", |b| {
        b.iter(|| auroc(black_box(&scores), &labels).unwrap())
    });
}

criterion_group!(benches, scoring, gradient, metrics);
criterion_main!(benches);
