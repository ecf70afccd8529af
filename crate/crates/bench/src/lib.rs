//! Shared fixtures for the benchmarks.

use eqocc::data_io::ShapeFamily;
use eqocc::rng::rng_from_seed;
use eqocc::PointCloud;

/// Noisy torus cloud, the same shape every call for a given seed.
pub fn torus_cloud(n: usize, seed: u64) -> PointCloud {
    let mut rng = rng_from_seed(seed);
    ShapeFamily::Torus
        .random(&mut rng)
        .noisy_cloud(n, 0.005, &mut rng)
        .expect("valid cloud")
}
