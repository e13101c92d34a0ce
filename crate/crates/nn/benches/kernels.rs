use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;
use vlmdiff_nn::kernels::{self, ConvGeom};
use vlmdiff_nn::{exec, Tensor};

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d_3x3_b16_16ch_32px");
    let geom = ConvGeom { cin: 16, h: 32, w: 32, k: 3, stride: 1, pad: 1 };
    let x = Tensor::randn(&[16, 16, 32, 32], &mut rng);
    let w = Tensor::randn(&[16, 16, 3, 3], &mut rng);
    let dy = Tensor::randn(&[16, 16, 32, 32], &mut rng);
    for mode in ["parallel", "sequential"] {
        let run = |f: &mut dyn FnMut()| {
            if mode == "sequential" {
                exec::sequential(f)
            } else {
                f()
            }
        };
        group.bench_function(BenchmarkId::new("forward", mode), |b| {
            b.iter(|| {
                run(&mut || {
                    black_box(kernels::conv2d_forward(x.data(), 16, &geom, w.data(), None, 16));
                })
            })
        });
        group.bench_function(BenchmarkId::new("backward", mode), |b| {
            b.iter(|| {
                run(&mut || {
                    black_box(kernels::conv2d_backward(x.data(), 16, &geom, w.data(), 16, dy.data()));
                })
            })
        });
    }
    group.finish();
}

fn group_norm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[32, 32, 16, 16], &mut rng);
    let gamma = vec![1.0f32; 32];
    let beta = vec![0.0f32; 32];
    let mut group = c.benchmark_group("group_norm_b32_32ch_16px");
    group.bench_function("parallel", |b| {
        b.iter(|| black_box(kernels::group_norm_forward(x.data(), 32, 32, 256, 8, &gamma, &beta, 1e-5)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            exec::sequential(|| {
                black_box(kernels::group_norm_forward(x.data(), 32, 32, 256, 8, &gamma, &beta, 1e-5))
            })
        })
    });
    group.finish();
}

criterion_group!(benches, conv, group_norm);
criterion_main!(benches);
