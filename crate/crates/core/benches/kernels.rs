//! Sequential versus data-parallel execution of the hot kernels.
//!
//! `jobs = 1` pins the work to one thread; `jobs = 0` uses every core. Build
//! with `--no-default-features` to measure the purely sequential code path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sandesc::autograd::{Mode, Tape};
use sandesc::net::{build_network, Model, NetworkConfig};
use sandesc::par::{current_num_threads, with_jobs};
use sandesc::Tensor;

fn random(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

fn thread_settings() -> Vec<(usize, String)> {
    vec![
        (1, "1 thread".into()),
        (0, format!("{} threads", current_num_threads())),
    ]
}

fn conv(c: &mut Criterion) {
    let x = random(&[4, 32, 48, 48], 1);
    let k = random(&[32, 32, 5, 5], 2);
    let mut group = c.benchmark_group("conv2d_forward_backward");
    for (jobs, label) in thread_settings() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            b.iter(|| {
                with_jobs(jobs, || {
                    let mut tape = Tape::new();
                    let xv = tape.param(x.clone());
                    let kv = tape.param(k.clone());
                    let y = tape.conv2d(xv, kv, None, 2).unwrap();
                    let loss = tape.sum(y);
                    tape.backward(loss).unwrap();
                })
            })
        });
    }
    group.finish();
}

fn forward(c: &mut Criterion) {
    let model: Model<f32> = build_network(&NetworkConfig::default(), 0).unwrap();
    let images = random(&[2, 3, 64, 64], 3);
    let mut group = c.benchmark_group("network_eval_forward");
    group.sample_size(10);
    for (jobs, label) in thread_settings() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            b.iter(|| with_jobs(jobs, || model.forward_eval_batch(images.clone()).unwrap()))
        });
    }
    group.finish();
}

fn train_forward(c: &mut Criterion) {
    let mut model: Model<f32> = build_network(&NetworkConfig::default(), 0).unwrap();
    let image = random(&[3, 64, 64], 4);
    let mut group = c.benchmark_group("network_train_forward");
    group.sample_size(10);
    for (jobs, label) in thread_settings() {
        group.bench_with_input(BenchmarkId::from_parameter(label), &jobs, |b, &jobs| {
            b.iter(|| with_jobs(jobs, || model.forward(&image, Mode::Train).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, forward, train_forward);
criterion_main!(benches);
