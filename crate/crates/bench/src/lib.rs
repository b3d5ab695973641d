//! Shared fixtures for the benchmarks.

use difrecon_core::canonicalize::{Frame, PointCloud};
use difrecon_core::fields::{PriorConfig, ShapePrior};
use difrecon_core::rng;
use difrecon_core::synthdata::{make_family, sample_shape, ShapeSampleSet};

/// Untrained desk-scale prior with `instances` latents.
pub fn desk_prior(instances: usize) -> ShapePrior {
    ShapePrior::init("car", PriorConfig::desk(), instances, &mut rng::stream(0, "bench")).expect("valid config")
}

/// Sample sets of the first `n` car-family shapes.
pub fn car_samples(n: usize, points: usize) -> Vec<ShapeSampleSet> {
    make_family("car", n, 0)
        .expect("known category")
        .iter()
        .enumerate()
        .map(|(i, s)| sample_shape(s, points, points, i as u64).expect("sampling succeeds"))
        .collect()
}

pub fn surface_cloud(set: &ShapeSampleSet) -> PointCloud {
    PointCloud::new(set.surface.iter().map(|s| s.x).collect(), Frame::Canonical)
}
