use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sbuf_core::autodiff::Tape;
use sbuf_core::bridge::{marginal_sample, posterior_params};
use sbuf_core::nets::{Generator, GeneratorConfig};
use sbuf_core::rng::{normal_vec, stream};
use sbuf_core::signal::stft::stft;
use sbuf_core::{ScheduleParams, StftConfig, Tensor};

fn schedule(c: &mut Criterion) {
    let sched = ScheduleParams::default();
    c.bench_function("transition_params", |b| {
        b.iter(|| sched.transition_params(black_box(0.25), black_box(0.5)).unwrap())
    });
    let mut rng = stream(0, &[]);
    let x0 = Tensor::new([16, 1024], normal_vec(&mut rng, 16 * 1024)).unwrap();
    let y = Tensor::new([16, 1024], normal_vec(&mut rng, 16 * 1024)).unwrap();
    c.bench_function("marginal_sample_16x1024", |b| {
        b.iter(|| marginal_sample(&x0, &y, black_box(0.5), &sched, &mut rng).unwrap())
    });
    c.bench_function("posterior_params_16x1024", |b| {
        b.iter(|| posterior_params(&y, &x0, &y, black_box(0.25), black_box(0.5), &sched).unwrap())
    });
}

fn signal(c: &mut Criterion) {
    let cfg = StftConfig::new(256, 64).unwrap();
    let x = normal_vec(&mut stream(1, &[]), 8000);
    c.bench_function("stft_1s_8k", |b| b.iter(|| stft(black_box(&x), &cfg).unwrap()));
}

fn generator(c: &mut Criterion) {
    let (g, params) = Generator::new(&GeneratorConfig::default(), 0).unwrap();
    let mut rng = stream(2, &[]);
    let x = Tensor::new([16, 1024], normal_vec(&mut rng, 16 * 1024)).unwrap();
    let y = Tensor::new([16, 1024], normal_vec(&mut rng, 16 * 1024)).unwrap();
    let t = vec![0.5; 16];
    c.bench_function("generator_forward_16x1024", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = tape.constants(&params.tensors);
            g.forward(&p, tape.constant(x.clone()), tape.constant(y.clone()), &t).unwrap().value()
        })
    });
    c.bench_function("generator_forward_backward_16x1024", |b| {
        b.iter(|| {
            let tape = Tape::new();
            let p = tape.leaves(&params.tensors);
            let out = g.forward(&p, tape.constant(x.clone()), tape.constant(y.clone()), &t).unwrap();
            tape.backward(out.square().sum()).unwrap()
        })
    });
}

criterion_group!(benches, schedule, signal, generator);
criterion_main!(benches);
