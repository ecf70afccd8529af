use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use eqocc::geometry::{all_neighborhoods, input_features};
use eqocc::so3::{angular_kernel_basis, clebsch_gordan, random_rotation, real_spherical_harmonics, wigner_d, CgTable};
use eqocc_bench::torus_cloud;

fn so3(c: &mut Criterion) {
    let r = random_rotation(7);
    let x = [0.3, -0.7, 0.2];
    for l in [1, 2, 4] {
        c.bench_function(&format!("wigner_d l={l}"), |b| b.iter(|| wigner_d(black_box(l), &r)));
        c.bench_function(&format!("sh l={l}"), |b| b.iter(|| real_spherical_harmonics(black_box(l), x)));
    }
    c.bench_function("clebsch_gordan 2x2", |b| b.iter(|| clebsch_gordan(2, 2, black_box(2))));
    let table = CgTable::standard();
    let cg = table.get(1, 1, 1);
    c.bench_function("angular_kernel_basis 1x1", |b| b.iter(|| angular_kernel_basis(cg, black_box(x))));
}

fn neighborhoods(c: &mut Criterion) {
    let cloud = torus_cloud(300, 1);
    c.bench_function("knn 300 k=15", |b| b.iter(|| all_neighborhoods(black_box(&cloud), 15)));
    c.bench_function("input_features 300 k=15", |b| b.iter(|| input_features(black_box(&cloud), 15)));
}

criterion_group!(benches, so3, neighborhoods);
criterion_main!(benches);
