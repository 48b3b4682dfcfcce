use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use eitl_core::graph::ConvOpts;
use eitl_core::noise::extract_noise;
use eitl_core::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("conv2d_3x3");
    for size in [16usize, 32, 64] {
        let x = Tensor::uniform(&[2, 16, size, size], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[16, 16, 3, 3], -0.1, 0.1, &mut rng);
        group.bench_with_input(BenchmarkId::new("forward_backward", size), &size, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                let xv = g.param(x.clone());
                let wv = g.param(w.clone());
                let y = g.conv2d(xv, wv, None, ConvOpts::new(1, 1)).unwrap();
                let l = g.sum_all(y);
                g.backward(l).unwrap();
                g.grad(wv)
            })
        });
    }
    group.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::uniform(&[4, 256, 64], -1.0, 1.0, &mut rng);
    let b = Tensor::uniform(&[4, 64, 256], -1.0, 1.0, &mut rng);
    c.bench_function("matmul_4x256x64x256", |bench| {
        bench.iter(|| {
            let g = Graph::new();
            let av = g.param(a.clone());
            let bv = g.param(b.clone());
            let y = g.matmul(av, bv).unwrap();
            let l = g.sum_all(y);
            g.backward(l).unwrap();
            g.grad(av)
        })
    });
}

fn noise(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[1, 3, 128, 128], 0.0, 1.0, &mut rng);
    c.bench_function("hpf_bank_128", |b| b.iter(|| extract_noise(&x).unwrap()));
}

criterion_group!(benches, conv, matmul, noise);
criterion_main!(benches);
