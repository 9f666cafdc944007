use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::geometry::sampling::{centroid, knn_radius};
use crate::geometry::Point3;

/// Normals plus the number of neighborhoods too degenerate (collinear or
/// coincident) to define a plane.
#[derive(Clone, Debug)]
pub struct NormalEstimate {
    pub normals: Vec<Point3>,
    pub degenerate: usize,
}

/// Local-PCA normals: the least-variance direction of each point's `k`
/// nearest neighbors, oriented away from the cloud centroid.
pub fn estimate_normals(points: &[Point3], k: usize) -> Result<NormalEstimate> {
    if k < 3 || k > points.len() {
        return Err(Error::invalid(format!(
            "normal estimation needs 3 <= k <= N, got k = {k}, N = {}",
            points.len()
        )));
    }
    let nbrs = knn_radius(points, points, k, f64::INFINITY)?;
    let c = centroid(points);
    let mut normals = Vec::with_capacity(points.len());
    let mut degenerate = 0;
    for (p, hood) in points.iter().zip(nbrs.chunks(k)) {
        let (n, flat) = pca_normal(points, hood);
        if flat {
            degenerate += 1;
        }
        normals.push(orient(n, p, &c));
    }
    Ok(NormalEstimate {
        normals,
        degenerate,
    })
}

/// Returns the normal and whether the neighborhood was rank deficient.
fn pca_normal(points: &[Point3], hood: &[usize]) -> (Vector3<f64>, bool) {
    let mut mean = Vector3::zeros();
    for &i in hood {
        mean += Vector3::from(points[i]);
    }
    mean /= hood.len() as f64;
    let mut cov = Matrix3::zeros();
    for &i in hood {
        let d = Vector3::from(points[i]) - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let largest = eig.eigenvalues[order[2]];
    let middle = eig.eigenvalues[order[1]];
    if !(largest > 1e-300) {
        return (Vector3::z(), true);
    }
    let smallest_vec = eig.eigenvectors.column(order[0]).normalize();
    if middle <= 1e-12 * largest {
        // Collinear: any direction orthogonal to the dominant axis will do.
        let dominant = eig.eigenvectors.column(order[2]).into_owned();
        let helper = if dominant.x.abs() < 0.9 {
            Vector3::x()
        } else {
            Vector3::y()
        };
        return (dominant.cross(&helper).normalize(), true);
    }
    (smallest_vec, false)
}

/// Flips `n` to point away from the centroid; when `p` sits in the plane
/// through the centroid, the first non-negligible component is made positive.
fn orient(n: Vector3<f64>, p: &Point3, c: &Point3) -> Point3 {
    let radial = Vector3::new(p[0] - c[0], p[1] - c[1], p[2] - c[2]);
    let dot = n.dot(&radial);
    let flip = if dot.abs() > 1e-9 * radial.norm().max(1e-12) {
        dot < 0.0
    } else {
        let lead = n.iter().copied().find(|x| x.abs() > 1e-9).unwrap_or(0.0);
        lead < 0.0
    };
    let n = if flip { -n } else { n };
    let n = n.normalize();
    [n.x, n.y, n.z]
}
