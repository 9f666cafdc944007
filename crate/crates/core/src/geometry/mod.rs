//! Point-cloud container, sampling and neighborhood primitives, normals,
//! synthetic datasets and PLY I/O.

mod cloud;
mod dataset;
mod matching;
mod normals;
mod ply;
mod sampling;

pub use cloud::{bounding_box, normalize_unit_cube, Point3, PointCloud};
pub use dataset::{
    generate_dataset, load_dataset, primitives_for, sample_surface, write_dataset, DatasetManifest,
    DatasetSpec, Primitive, ShapeFamily, MANIFEST_FILE,
};
pub use matching::{match_points, min_cost_assignment};
pub use normals::{estimate_normals, NormalEstimate};
pub use ply::{parse_ply, ply_string, read_ply, write_ply};
pub use sampling::{centroid, farthest_point_sample, knn_radius};
