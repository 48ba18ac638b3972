//! Data-parallel kernels vs their sequential fallbacks.
//!
//! Run with `cargo bench -p mode-core`. The `*_par` rows need the default
//! `parallel` feature; without it only the sequential rows run.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mode_core::embed::EmbeddingMatrix;
use mode_core::kernels::{dot_matrix_seq, nearest_center_seq, pairwise_sq_dist_seq, Mat64};
use mode_core::stream::{derive_rng, gauss};

fn unit_rows(seed: u64, index: u64, rows: usize, dim: usize) -> EmbeddingMatrix {
    let mut rng = derive_rng(seed, "bench", index);
    let data: Vec<Vec<f32>> = (0..rows)
        .map(|_| (0..dim).map(|_| gauss(&mut rng) as f32).collect())
        .collect();
    EmbeddingMatrix::from_rows(&data).unwrap().normalize_rows().matrix
}

fn mat64(seed: u64, index: u64, rows: usize, cols: usize) -> Mat64 {
    let mut rng = derive_rng(seed, "bench-mat", index);
    let mut m = Mat64::zeros(rows, cols);
    for v in m.data_mut() {
        *v = gauss(&mut rng);
    }
    m
}

fn bench_pairwise(c: &mut Criterion) {
    let mut group = c.benchmark_group("pairwise_sq_dist");
    group.sample_size(20);
    for &(rows, k) in &[(2048usize, 64usize), (8192, 64)] {
        let points = unit_rows(1, 0, rows, 32);
        let centers = unit_rows(1, 1, k, 32);
        group.bench_with_input(
            BenchmarkId::new("seq", format!("{rows}x{k}")),
            &(&points, &centers),
            |b, (p, cn)| b.iter(|| pairwise_sq_dist_seq(p, cn).unwrap()),
        );
        #[cfg(feature = "parallel")]
        group.bench_with_input(
            BenchmarkId::new("par", format!("{rows}x{k}")),
            &(&points, &centers),
            |b, (p, cn)| {
                b.iter(|| mode_core::kernels::pairwise_sq_dist_par(p, cn).unwrap())
            },
        );
    }
    group.finish();
}

fn bench_nearest(c: &mut Criterion) {
    let mut group = c.benchmark_group("nearest_center");
    group.sample_size(20);
    let points = unit_rows(2, 0, 8192, 32);
    let centers = unit_rows(2, 1, 64, 32);
    group.bench_function("seq/8192x64", |b| {
        b.iter(|| nearest_center_seq(&points, &centers).unwrap())
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par/8192x64", |b| {
        b.iter(|| mode_core::kernels::nearest_center_par(&points, &centers).unwrap())
    });
    group.finish();
}

fn bench_dot_matrix(c: &mut Criterion) {
    let mut group = c.benchmark_group("dot_matrix");
    group.sample_size(20);
    let a = mat64(3, 0, 1024, 16);
    let bm = mat64(3, 1, 1024, 16);
    group.bench_function("seq/1024x1024x16", |b| {
        b.iter(|| dot_matrix_seq(&a, &bm).unwrap())
    });
    #[cfg(feature = "parallel")]
    group.bench_function("par/1024x1024x16", |b| {
        b.iter(|| mode_core::kernels::dot_matrix_par(&a, &bm).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_pairwise, bench_nearest, bench_dot_matrix);
criterion_main!(benches);
