use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use nextdit::contextdrop::DropSpec;
use nextdit::dit::{forward_velocity, DitConfig, VelocityOptions};
use nextdit::flowlab::{grad, gaussian_flow_velocity, GaussianFlowSpec, ToyFlow};
use nextdit::sampler::{make_schedule, sample, ScheduleKind, ScheduleSpec, Solver, Timesteps};
use nextdit_bench::{random_params, random_tensor};

fn forward(c: &mut Criterion) {
    let cfg = DitConfig { depth: 4, patch: 2, in_channels: 3, ..DitConfig::default() };
    let params = random_params(&cfg, 1);
    let x = random_tensor(&[4, 16, 16, 3], 2);
    let plain = VelocityOptions::default();
    let dropped = VelocityOptions { context_drop: Some(DropSpec::new(0.75).unwrap()), ..Default::default() };
    let mut group = c.benchmark_group("forward_velocity 4x16x16x3");
    group.sample_size(20);
    group.bench_function("baseline", |b| b.iter(|| forward_velocity(&params, &cfg, black_box(&x), 0.1, None, &plain).unwrap()));
    group.bench_function("context drop 0.75", |b| {
        b.iter(|| forward_velocity(&params, &cfg, black_box(&x), 0.1, None, &dropped).unwrap())
    });
    group.finish();
}

fn training_step(c: &mut Criterion) {
    let mut flow = ToyFlow::new(ToyFlow::config(32, 2), 3).unwrap();
    flow.params = random_params(&flow.cfg, 4);
    let x1 = random_tensor(&[256, 2], 5);
    let noise = random_tensor(&[256, 2], 6);
    let t: Vec<f64> = (0..256).map(|i| (i as f64 + 0.5) / 256.0).collect();
    let mut group = c.benchmark_group("toy flow");
    group.sample_size(10);
    group.bench_function("loss and gradient, batch 256", |b| b.iter(|| grad(&flow, black_box(&x1), &t, &noise).unwrap()));
    group.finish();
}

fn samplers(c: &mut Criterion) {
    let spec = GaussianFlowSpec::new(vec![2.0, 2.0], 0.5).unwrap();
    let x0 = random_tensor(&[4096, 2], 7);
    let ts = Timesteps::uniform(16).unwrap();
    let mut group = c.benchmark_group("analytic flow, 16 steps");
    for solver in [Solver::Euler, Solver::Midpoint, Solver::Rk4] {
        group.bench_with_input(BenchmarkId::from_parameter(solver), &solver, |b, &s| {
            b.iter(|| sample(s, |x, t| gaussian_flow_velocity(&spec, x, t), black_box(&x0), &ts).unwrap())
        });
    }
    group.finish();
    c.bench_function("sigmoid schedule, 1000 steps", |b| {
        let spec = ScheduleSpec::new(ScheduleKind::sigmoid_default(), 1000);
        b.iter(|| make_schedule(black_box(&spec)).unwrap())
    });
}

criterion_group!(benches, forward, training_step, samplers);
criterion_main!(benches);
