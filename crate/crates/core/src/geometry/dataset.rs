//! Synthetic surface datasets and their on-disk layout.
//!
//! A dataset directory holds one ASCII PLY per cloud and a `manifest.json`
//! naming the files together with the spec that generated them.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    farthest_point_sample, normalize_unit_cube, read_ply, write_ply, Point3, PointCloud,
};

/// Dense surface samples drawn before farthest point sampling thins them to N.
const OVERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Sphere,
    CubeSurface,
    Torus,
    /// Two different primitives side by side.
    Composite,
}

impl std::str::FromStr for ShapeFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeFamily::Sphere),
            "cube_surface" => Ok(ShapeFamily::CubeSurface),
            "torus" => Ok(ShapeFamily::Torus),
            "composite" => Ok(ShapeFamily::Composite),
            other => Err(Error::invalid(format!("unknown shape family '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub family: ShapeFamily,
    pub count: usize,
    pub points: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset count must be at least 1"));
        }
        if self.points == 0 || !self.points.is_multiple_of(16) {
            return Err(Error::invalid(format!(
                "points per cloud must be a positive multiple of 16, got {}",
                self.points
            )));
        }
        Ok(())
    }
}

/// An analytic surface that can be sampled uniformly by area.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Sphere {
        center: Point3,
        radius: f64,
    },
    /// Axis-aligned box surface.
    Cuboid {
        center: Point3,
        half: Point3,
    },
    /// Ring around the z axis through `center`.
    Torus {
        center: Point3,
        major: f64,
        minor: f64,
    },
}

impl Primitive {
    pub fn area(&self) -> f64 {
        match *self {
            Primitive::Sphere { radius, .. } => 2.0 * TAU * radius * radius,
            Primitive::Cuboid {
                half: [a, b, c], ..
            } => 8.0 * (a * b + b * c + a * c),
            Primitive::Torus { major, minor, .. } => TAU * TAU * major * minor,
        }
    }

    /// Distance-like residual of the implicit surface equation; zero on the surface.
    pub fn residual(&self, p: &Point3) -> f64 {
        match *self {
            Primitive::Sphere { center, radius } => {
                let d = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                ((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - radius).abs()
            }
            Primitive::Cuboid { center, half } => {
                let mut inside: f64 = f64::NEG_INFINITY;
                for a in 0..3 {
                    inside = inside.max((p[a] - center[a]).abs() - half[a]);
                }
                inside.abs()
            }
            Primitive::Torus {
                center,
                major,
                minor,
            } => {
                let (x, y, z) = (p[0] - center[0], p[1] - center[1], p[2] - center[2]);
                let ring = (x * x + y * y).sqrt() - major;
                (ring * ring + z * z - minor * minor).abs()
            }
        }
    }

    pub fn sample(&self, count: usize, rng: &mut impl Rng) -> Vec<Point3> {
        (0..count).map(|_| self.sample_one(rng)).collect()
    }

    fn sample_one(&self, rng: &mut impl Rng) -> Point3 {
        match *self {
            Primitive::Sphere { center, radius } => loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-9 {
                    break [0, 1, 2].map(|a| center[a] + radius * v[a] / n);
                }
            },
            Primitive::Cuboid { center, half } => {
                // pick a face pair by area, then a side and a uniform point on it
                let areas = [half[1] * half[2], half[0] * half[2], half[0] * half[1]];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random::<f64>() * total;
                let mut axis = 2;
                for (a, w) in areas.iter().enumerate() {
                    if u < *w {
                        axis = a;
                        break;
                    }
                    u -= w;
                }
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = if a == axis {
                        if rng.random::<bool>() {
                            half[a]
                        } else {
                            -half[a]
                        }
                    } else {
                        rng.random_range(-half[a]..=half[a])
                    };
                }
                [0, 1, 2].map(|a| center[a] + p[a])
            }
            Primitive::Torus {
                center,
                major,
                minor,
            } => {
                let u = rng.random::<f64>() * TAU;
                // tube angle with density proportional to the local ring radius
                let v = loop {
                    let v = rng.random::<f64>() * TAU;
                    if rng.random::<f64>() * (major + minor) <= major + minor * v.cos() {
                        break v;
                    }
                };
                let ring = major + minor * v.cos();
                [
                    center[0] + ring * u.cos(),
                    center[1] + ring * u.sin(),
                    center[2] + minor * v.sin(),
                ]
            }
        }
    }
}

fn random_primitive(kind: usize, center: Point3, rng: &mut impl Rng) -> Primitive {
    match kind {
        0 => Primitive::Sphere {
            center,
            radius: rng.random_range(0.5..1.0),
        },
        1 => Primitive::Cuboid {
            center,
            half: [
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
            ],
        },
        _ => Primitive::Torus {
            center,
            major: 1.0,
            minor: rng.random_range(0.25..0.5),
        },
    }
}

/// The primitives making up one cloud of `family`.
pub fn primitives_for(family: ShapeFamily, rng: &mut impl Rng) -> Vec<Primitive> {
    let origin = [0.0; 3];
    match family {
        ShapeFamily::Sphere => vec![Primitive::Sphere {
            center: origin,
            radius: 1.0,
        }],
        ShapeFamily::CubeSurface => vec![random_primitive(1, origin, rng)],
        ShapeFamily::Torus => vec![random_primitive(2, origin, rng)],
        ShapeFamily::Composite => {
            let first = rng.random_range(0..3);
            let second = (first + rng.random_range(1..3)) % 3;
            let offset: [f64; 3] = [
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
                StandardNormal.sample(rng),
            ];
            let len = (offset[0] * offset[0] + offset[1] * offset[1] + offset[2] * offset[2])
                .sqrt()
                .max(1e-9);
            let gap = rng.random_range(1.2..1.8);
            let center = offset.map(|x| x / len * gap);
            vec![
                random_primitive(first, origin, rng),
                random_primitive(second, center, rng),
            ]
        }
    }
}

/// Area-weighted dense samples from the union of `prims`.
pub fn sample_surface(prims: &[Primitive], count: usize, rng: &mut impl Rng) -> Vec<Point3> {
    let total: f64 = prims.iter().map(Primitive::area).sum();
    let mut out = Vec::with_capacity(count);
    let mut assigned = 0;
    for (i, p) in prims.iter().enumerate() {
        let n = if i + 1 == prims.len() {
            count - assigned
        } else {
            ((p.area() / total) * count as f64).round() as usize
        };
        let n = n.min(count - assigned);
        out.extend(p.sample(n, rng));
        assigned += n;
    }
    out
}

/// Generates `spec.count` normalized clouds of exactly `spec.points` points.
///
/// Cloud `i` draws from its own ChaCha stream of the spec seed, so any
/// prefix of a dataset is reproducible on its own.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<PointCloud>> {
    spec.validate()?;
    (0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let prims = primitives_for(spec.family, &mut rng);
            let dense = sample_surface(&prims, spec.points * OVERSAMPLE, &mut rng);
            let keep = farthest_point_sample(&dense, spec.points)?;
            let pts = keep.iter().map(|&j| dense[j]).collect();
            normalize_unit_cube(&PointCloud::from_points(pts)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub files: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn write_dataset(
    dir: &Path,
    spec: &DatasetSpec,
    clouds: &[PointCloud],
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::with_capacity(clouds.len());
    for (i, c) in clouds.iter().enumerate() {
        let name = format!("cloud_{i:05}.ply");
        write_ply(&dir.join(&name), c)?;
        files.push(name);
    }
    let manifest = DatasetManifest {
        spec: spec.clone(),
        files,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(manifest)
}

/// Loads every cloud listed in a dataset directory's manifest.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PointCloud>)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    let clouds = manifest
        .files
        .iter()
        .map(|f| read_ply(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clouds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::bounding_box;

    fn spec(family: ShapeFamily) -> DatasetSpec {
        DatasetSpec {
            family,
            count: 2,
            points: 256,
            seed: 7,
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_dataset(&spec(ShapeFamily::Sphere)).unwrap();
        let b = generate_dataset(&spec(ShapeFamily::Sphere)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        assert!(a.iter().all(|c| c.len() == 256));
    }

    #[test]
    fn every_family_is_normalized() {
        for fam in [
            ShapeFamily::Sphere,
            ShapeFamily::CubeSurface,
            ShapeFamily::Torus,
            ShapeFamily::Composite,
        ] {
            for c in generate_dataset(&spec(fam)).unwrap() {
                let (lo, hi) = bounding_box(c.points());
                let ext = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
                assert!(lo.iter().all(|&x| x >= 0.0) && hi.iter().all(|&x| x <= 1.0));
                assert!((ext - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cube_surface_points_lie_on_the_box() {
        for c in generate_dataset(&spec(ShapeFamily::CubeSurface)).unwrap() {
            // every face is sampled, so the bounding box is the box itself
            let (lo, hi) = bounding_box(c.points());
            for p in c.points() {
                let on_face =
                    (0..3).any(|a| (p[a] - lo[a]).abs() < 1e-6 || (p[a] - hi[a]).abs() < 1e-6);
                assert!(on_face, "{p:?} is off the box surface");
            }
        }
    }

    #[test]
    fn torus_samples_satisfy_the_implicit_equation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let prims = primitives_for(ShapeFamily::Torus, &mut rng);
        let pts = sample_surface(&prims, 1024, &mut rng);
        let keep = farthest_point_sample(&pts, 256).unwrap();
        for &i in &keep {
            let p = pts[i];
            let (x, y, z) = (p[0], p[1], p[2]);
            let Primitive::Torus { major, minor, .. } = prims[0] else {
                unreachable!()
            };
            let ring = (x * x + y * y).sqrt() - major;
            assert!((ring * ring + z * z - minor * minor).abs() < 1e-5);
        }
    }

    #[test]
    fn primitive_samples_have_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..5 {
            for prim in primitives_for(ShapeFamily::Composite, &mut rng) {
                for p in prim.sample(100, &mut rng) {
                    assert!(prim.residual(&p) < 1e-9);
                }
            }
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(ShapeFamily::Sphere);
        s.points = 100;
        assert!(generate_dataset(&s).is_err());
        s.points = 256;
        s.count = 0;
        assert!(generate_dataset(&s).is_err());
        assert!("cylinder".parse::<ShapeFamily>().is_err());
        assert!(serde_json::from_str::<DatasetSpec>(
            r#"{"family":"cylinder","count":1,"points":16,"seed":0}"#
        )
        .is_err());
    }

    #[test]
    fn dataset_directory_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let s = DatasetSpec {
            family: ShapeFamily::Torus,
            count: 3,
            points: 32,
            seed: 1,
        };
        let clouds = generate_dataset(&s).unwrap();
        let m = write_dataset(dir.path(), &s, &clouds).unwrap();
        let (m2, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(m, m2);
        for (a, b) in clouds.iter().zip(&loaded) {
            for (p, q) in a.points().iter().zip(b.points()) {
                for k in 0..3 {
                    assert_eq!(p[k] as f32, q[k] as f32);
                }
            }
        }
    }
}
