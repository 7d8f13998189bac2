use std::hint::black_box;

use aslsr_bench::{channels, field, volume};
use aslsr_core::metrics::ssim3d;
use aslsr_core::nn::ops::{conv3d, conv3d_grad_input, conv3d_grad_weight};
use aslsr_core::nn::Critic;
use aslsr_core::volume::{downsample, resample};
use aslsr_core::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, MetricsOptions, ResampleMethod};
use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::Array5;

fn convolution(c: &mut Criterion) {
    let x = channels(16, [32, 24, 24]);
    let w = Array5::from_elem((16, 16, 3, 3, 3), 0.01);
    let dy = channels(16, [32, 24, 24]);
    let mut g = c.benchmark_group("conv3d_16x16_32x24x24");
    g.sample_size(10);
    g.bench_function("forward", |b| b.iter(|| conv3d(black_box(x.view()), w.view(), None, 1)));
    g.bench_function("grad_weight", |b| {
        b.iter(|| conv3d_grad_weight(black_box(x.view()), dy.view(), 3, 1))
    });
    g.bench_function("grad_input", |b| {
        b.iter(|| conv3d_grad_input(black_box(dy.view()), w.view(), [32, 24, 24], 1))
    });
    g.finish();
}

fn networks(c: &mut Criterion) {
    let (asl, prior) = (field([32, 24, 48]), field([32, 24, 48]));
    let spec = GeneratorSpec {
        base_width: 8,
        zero_init_output: false,
        ..Default::default()
    };
    let gen = Generator::new(spec, 1).unwrap();
    let d = Discriminator::new(
        DiscriminatorSpec {
            base_width: 8,
            ..Default::default()
        },
        2,
    )
    .unwrap();
    let mut g = c.benchmark_group("networks_32x24x48");
    g.sample_size(10);
    g.bench_function("generator_forward", |b| {
        b.iter(|| gen.forward(black_box(&asl), &prior).unwrap())
    });
    g.bench_function("generator_backward", |b| {
        b.iter(|| {
            let pass = gen.forward_train(black_box(&asl), &prior).unwrap();
            pass.backward(&asl)
        })
    });
    g.bench_function("critic_grad", |b| {
        b.iter(|| d.mean_score_grad(black_box(&asl)).unwrap())
    });
    g.finish();
}

fn resampling(c: &mut Criterion) {
    let v = volume([64, 48, 48], [3.75, 3.75, 2.5]);
    let mut g = c.benchmark_group("resample_64x48x48");
    g.sample_size(10);
    for m in ResampleMethod::ALL {
        g.bench_function(format!("{m}_to_128x96x48"), |b| {
            b.iter(|| resample(black_box(&v), [128, 96, 48], m).unwrap())
        });
    }
    g.bench_function("downsample_to_32x24x48", |b| {
        b.iter(|| downsample(black_box(&v), [32, 24, 48]).unwrap())
    });
    g.finish();
}

fn metrics(c: &mut Criterion) {
    let (a, b) = (field([64, 48, 48]), field([64, 48, 48]).mapv(|v| v * 0.9 + 0.05));
    let opts = MetricsOptions::default();
    c.bench_function("ssim3d_64x48x48", |bch| {
        bch.iter(|| ssim3d(black_box(&a), &b, &opts).unwrap())
    });
}

criterion_group!(benches, convolution, networks, resampling, metrics);
criterion_main!(benches);
