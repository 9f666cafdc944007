//! Chamfer distance and point-to-point / point-to-plane PSNR.

use serde::{Deserialize, Serialize};

use crate::autodiff::sq_dist;
use crate::error::{Error, Result};
use crate::geometry::{estimate_normals, Point3, PointCloud};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NnBackend {
    #[default]
    BruteForce,
    /// Sweep over targets sorted by x, pruned by the x gap.
    SortedSweep,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub peak: f64,
    /// Reported when the symmetric error is exactly zero.
    pub cap_db: f64,
    pub backend: NnBackend,
    /// Estimate missing normals for point-to-plane error.
    pub estimate_normals: bool,
    pub normal_k: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            peak: 1.0,
            cap_db: 100.0,
            backend: NnBackend::BruteForce,
            estimate_normals: true,
            normal_k: 12,
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) || !self.peak.is_finite() {
            return Err(Error::invalid("peak must be positive"));
        }
        if !self.cap_db.is_finite() {
            return Err(Error::invalid("infinity cap must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Psnr {
    pub db: f64,
    /// Zero error; `db` holds the configured cap.
    pub perfect: bool,
}

/// For every query, the index of its nearest target (lowest index on ties)
/// and the squared distance to it.
pub fn nearest(
    queries: &[Point3],
    targets: &[Point3],
    backend: NnBackend,
) -> Result<Vec<(usize, f64)>> {
    if queries.is_empty() || targets.is_empty() {
        return Err(Error::invalid(
            "nearest-neighbor search needs nonempty sets",
        ));
    }
    Ok(match backend {
        NnBackend::BruteForce => queries.iter().map(|q| brute_nearest(q, targets)).collect(),
        NnBackend::SortedSweep => {
            let mut order: Vec<usize> = (0..targets.len()).collect();
            order.sort_by(|&i, &j| targets[i][0].total_cmp(&targets[j][0]).then(i.cmp(&j)));
            let xs: Vec<f64> = order.iter().map(|&i| targets[i][0]).collect();
            queries
                .iter()
                .map(|q| sweep_nearest(q, targets, &order, &xs))
                .collect()
        }
    })
}

fn brute_nearest(q: &Point3, targets: &[Point3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, t) in targets.iter().enumerate() {
        let d = sq_dist(q, t);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn sweep_nearest(q: &Point3, targets: &[Point3], order: &[usize], xs: &[f64]) -> (usize, f64) {
    let start = xs.partition_point(|&x| x < q[0]);
    let mut best = (usize::MAX, f64::INFINITY);
    let consider = |j: usize, best: &mut (usize, f64)| {
        let d = sq_dist(q, &targets[j]);
        if d < best.1 || (d == best.1 && j < best.0) {
            *best = (j, d);
        }
    };
    for (p, &x) in xs.iter().enumerate().skip(start) {
        if (x - q[0]) * (x - q[0]) > best.1 {
            break;
        }
        consider(order[p], &mut best);
    }
    for p in (0..start).rev() {
        let x = xs[p];
        if (x - q[0]) * (x - q[0]) > best.1 {
            break;
        }
        consider(order[p], &mut best);
    }
    best
}

fn mean_nearest(a: &[Point3], b: &[Point3], backend: NnBackend) -> Result<f64> {
    let nn = nearest(a, b, backend)?;
    Ok(nn.iter().map(|&(_, d)| d).sum::<f64>() / a.len() as f64)
}

/// Symmetric mean squared nearest-neighbor distance.
pub fn chamfer(a: &[Point3], b: &[Point3]) -> Result<f64> {
    chamfer_with(a, b, NnBackend::BruteForce)
}

pub fn chamfer_with(a: &[Point3], b: &[Point3], backend: NnBackend) -> Result<f64> {
    Ok(mean_nearest(a, b, backend)? + mean_nearest(b, a, backend)?)
}

/// `10 log10(3 peak^2 / mse)`, or the cap when `mse` is zero.
pub fn psnr_db(mse: f64, cfg: &MetricsConfig) -> Psnr {
    if mse == 0.0 {
        Psnr {
            db: cfg.cap_db,
            perfect: true,
        }
    } else {
        Psnr {
            db: 10.0 * (3.0 * cfg.peak * cfg.peak / mse).log10(),
            perfect: false,
        }
    }
}

/// Symmetric point-to-point error `max(e_AB, e_BA)`.
pub fn point_to_point_mse(a: &[Point3], b: &[Point3], backend: NnBackend) -> Result<f64> {
    Ok(mean_nearest(a, b, backend)?.max(mean_nearest(b, a, backend)?))
}

pub fn d1(a: &[Point3], b: &[Point3], cfg: &MetricsConfig) -> Result<Psnr> {
    cfg.validate()?;
    Ok(psnr_db(point_to_point_mse(a, b, cfg.backend)?, cfg))
}

fn normals_of(cloud: &PointCloud, cfg: &MetricsConfig) -> Result<Vec<Point3>> {
    match cloud.normals() {
        Some(n) => Ok(n.to_vec()),
        None if cfg.estimate_normals => {
            let k = cfg.normal_k.min(cloud.len());
            Ok(estimate_normals(cloud.points(), k)?.normals)
        }
        None => Err(Error::invalid(
            "point-to-plane error needs normals and estimation is disabled",
        )),
    }
}

/// Mean squared projection of each query's nearest-neighbor error onto the
/// query normal.
fn plane_error(a: &[Point3], normals: &[Point3], b: &[Point3], backend: NnBackend) -> Result<f64> {
    let nn = nearest(a, b, backend)?;
    let sum: f64 = a
        .iter()
        .zip(normals)
        .zip(&nn)
        .map(|((p, n), &(j, _))| {
            let q = b[j];
            let proj = (p[0] - q[0]) * n[0] + (p[1] - q[1]) * n[1] + (p[2] - q[2]) * n[2];
            proj * proj
        })
        .sum();
    Ok(sum / a.len() as f64)
}

pub fn point_to_plane_mse(a: &PointCloud, b: &PointCloud, cfg: &MetricsConfig) -> Result<f64> {
    let na = normals_of(a, cfg)?;
    let nb = normals_of(b, cfg)?;
    let ab = plane_error(a.points(), &na, b.points(), cfg.backend)?;
    let ba = plane_error(b.points(), &nb, a.points(), cfg.backend)?;
    Ok(ab.max(ba))
}

pub fn d2(a: &PointCloud, b: &PointCloud, cfg: &MetricsConfig) -> Result<Psnr> {
    cfg.validate()?;
    Ok(psnr_db(point_to_plane_mse(a, b, cfg)?, cfg))
}
