//! Hot kernels on the parallel backend versus a single worker.
//!
//! `cargo bench -p tunet-core` compares the rayon pool with a one-thread pool;
//! `cargo bench -p tunet-core --no-default-features` runs the plain sequential
//! fallback for both rows.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array3, Array4, Array5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tunet::loss::{local_cc_arrays, LossConfig};
use tunet::nn::conv::conv3d;
use tunet::par;
use tunet::transformer::scaled_dot_attention;
use tunet::warp::warp_array;

fn both<F: Fn() + Send + Sync>(c: &mut Criterion, group: &str, f: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("parallel", par::threads()), |b| b.iter(&f));
    g.bench_function(BenchmarkId::new("single", 1), |b| {
        b.iter(|| par::single_threaded(&f))
    });
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut uniform = |lo: f64, hi: f64| rng.gen_range(lo..hi);

    let x = Array5::from_shape_simple_fn((1, 16, 32, 32, 32), || uniform(-1.0, 1.0));
    let w = Array5::from_shape_simple_fn((16, 16, 3, 3, 3), || uniform(-0.1, 0.1));
    both(c, "conv3d 16ch 32^3", || {
        black_box(conv3d(x.view(), w.view(), None, 1, 1).unwrap());
    });

    let q = Array4::from_shape_simple_fn((1, 4, 512, 64), || uniform(-1.0, 1.0));
    let k = Array4::from_shape_simple_fn((1, 4, 512, 64), || uniform(-1.0, 1.0));
    let v = Array4::from_shape_simple_fn((1, 4, 512, 64), || uniform(-1.0, 1.0));
    both(c, "attention 4x512x64", || {
        black_box(scaled_dot_attention(q.view(), k.view(), v.view()).unwrap());
    });

    let m = Array3::from_shape_simple_fn((64, 64, 64), || uniform(0.0, 1.0));
    let u = Array4::from_shape_simple_fn((3, 64, 64, 64), || uniform(-3.0, 3.0));
    both(c, "warp 64^3", || {
        black_box(warp_array(m.view(), u.view()));
    });

    let f = Array3::from_shape_simple_fn((64, 64, 64), || uniform(0.0, 1.0));
    let cfg = LossConfig::default();
    both(c, "local cc + grad 64^3", || {
        black_box(local_cc_arrays(m.view(), f.view(), &cfg, true));
    });
}

criterion_group!(benches, kernels);
criterion_main!(benches);
