use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use crisp_bench::{aligned_batch, many_to_one_batch};
use crisp_core::loss::DEFAULT_COLOCATION_RADIUS_M;
use crisp_core::{
    build_positive_mask, many_to_one_crisp_loss, parameterized_crisp_loss, standard_crisp_loss, LossWeight, Temperature,
};

fn losses(c: &mut Criterion) {
    let tau = Temperature::default().tau().unwrap();
    let mut group = c.benchmark_group("loss");
    group.sample_size(20);
    for &(n, dim) in &[(64, 128), (350, 512)] {
        let batch = aligned_batch(n, dim, 0);
        group.bench_with_input(BenchmarkId::new("standard", format!("{n}x{dim}")), &batch, |b, batch| {
            b.iter(|| standard_crisp_loss(black_box(batch), tau).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("par", format!("{n}x{dim}")), &batch, |b, batch| {
            b.iter(|| parameterized_crisp_loss(black_box(batch), tau, LossWeight { w: 0.3 }).unwrap())
        });
        let m2o = many_to_one_batch(n, 2, dim, 0);
        group.bench_with_input(BenchmarkId::new("m2o", format!("{n}x{dim}")), &m2o, |b, batch| {
            b.iter(|| many_to_one_crisp_loss(black_box(batch), tau, DEFAULT_COLOCATION_RADIUS_M).unwrap())
        });
    }
    group.finish();
}

fn mask(c: &mut Criterion) {
    let batch = many_to_one_batch(350, 2, 4, 1);
    c.bench_function("positive_mask/350", |b| {
        b.iter(|| {
            build_positive_mask(
                black_box(batch.coords.as_deref()),
                black_box(&batch.pair_index),
                DEFAULT_COLOCATION_RADIUS_M,
            )
            .unwrap()
        })
    });
}

criterion_group!(benches, losses, mask);
criterion_main!(benches);
