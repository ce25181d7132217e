use criterion::{criterion_group, criterion_main, Criterion};
use sbuf_core::train::data::source_for;
use sbuf_core::train::{TrainMode, Trainer};
use sbuf_core::ExperimentConfig;

fn step(c: &mut Criterion, name: &str, mode: TrainMode) {
    let mut cfg = ExperimentConfig::default();
    cfg.train.mode = mode;
    let mut trainer = Trainer::new(&cfg).unwrap();
    let mut src = source_for(&cfg.data, cfg.seed);
    let (x0, y) = src.batch(0, cfg.train.batch_size).unwrap();
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    group.bench_function(name, |b| b.iter(|| trainer.step(&x0, &y).unwrap()));
    group.finish();
}

fn steps(c: &mut Criterion) {
    step(c, "sb_ufogen", TrainMode::SbUfogen);
    step(c, "sb_baseline", TrainMode::SbBaseline);
}

criterion_group!(benches, steps);
criterion_main!(benches);
