//! Shared fixtures for the benchmarks.

use pcjscc::geometry::{generate_dataset, DatasetSpec, PointCloud, ShapeFamily};

pub fn clouds(count: usize, points: usize, seed: u64) -> Vec<PointCloud> {
    generate_dataset(&DatasetSpec {
        family: ShapeFamily::Composite,
        count,
        points,
        seed,
    })
    .expect("valid fixture spec")
}
