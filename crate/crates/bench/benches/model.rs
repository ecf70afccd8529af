use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use eqocc::geometry::BoundingBox;
use eqocc::model::{init_params, Precision};
use eqocc::recon::{marching_cubes, NearestIndex, OccupancyGrid};
use eqocc::rng::rng_from_seed;
use eqocc::{ModelConfig, OccupancyModel};
use eqocc_bench::torus_cloud;
use rand::Rng as _;

fn model(c: &mut Criterion) {
    let cloud = torus_cloud(300, 2);
    let mut rng = rng_from_seed(3);
    let qs: Vec<[f64; 3]> = (0..64).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5))).collect();
    let mut p = init_params(&ModelConfig::desk(), 1).unwrap();
    p.radius_scale = 0.1;
    let m = OccupancyModel::new(p).unwrap();
    let mut g = c.benchmark_group("desk model");
    g.sample_size(10);
    for (name, m) in [("f64", m.clone()), ("f32", m.with_precision(Precision::Single))] {
        g.bench_function(format!("encode 300 {name}"), |b| {
            b.iter(|| m.encode_cloud(black_box(&cloud)).unwrap())
        });
        let enc = m.encode_cloud(&cloud).unwrap();
        g.bench_function(format!("64 queries {name}"), |b| b.iter(|| m.occupancy_batch(&enc, black_box(&qs))));
    }
    g.finish();
}

fn recon(c: &mut Criterion) {
    let bbox = BoundingBox::new([-1.0; 3], [1.0; 3]).unwrap();
    let grid = OccupancyGrid::from_fn(bbox, [64; 3], |p| 1.0 - (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).unwrap();
    c.bench_function("marching_cubes 64^3", |b| b.iter(|| marching_cubes(black_box(&grid), 0.2)));

    let mut rng = rng_from_seed(4);
    let pts: Vec<[f64; 3]> = (0..100_000).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5))).collect();
    let idx = NearestIndex::new(&pts).unwrap();
    let qs: Vec<[f64; 3]> = (0..1000).map(|_| [0, 1, 2].map(|_| rng.random_range(-0.5..0.5))).collect();
    c.bench_function("nearest 1k queries in 100k", |b| {
        b.iter(|| qs.iter().map(|&q| idx.nearest_distance(q)).sum::<f64>())
    });
}

criterion_group!(benches, model, recon);
criterion_main!(benches);
