//! Farthest point sampling and radius-limited k-nearest-neighbor queries.
//!
//! Both are fully determined by geometry: ties are broken on coordinates,
//! never on input order, so permuting a cloud permutes nothing downstream.

use std::cmp::Ordering;

use crate::autodiff::sq_dist;
use crate::error::{Error, Result};
use crate::geometry::Point3;

fn lex_cmp(a: &Point3, b: &Point3) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

/// True if `(d, p)` beats `(best_d, best_p)`: larger distance, then the
/// lexicographically smaller coordinate.
fn farther(d: f64, p: &Point3, best_d: f64, best_p: &Point3) -> bool {
    d > best_d || (d == best_d && lex_cmp(p, best_p) == Ordering::Less)
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    c.map(|x| x / points.len() as f64)
}

/// Greedy farthest point sampling of `m` distinct indices.
///
/// Starts from the point farthest from the centroid; every later pick
/// maximizes its distance to the already selected set.
pub fn farthest_point_sample(points: &[Point3], m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 || m > n {
        return Err(Error::invalid(format!("cannot sample {m} of {n} points")));
    }
    let c = centroid(points);
    let mut start = 0;
    let mut start_d = sq_dist(&points[0], &c);
    for (i, p) in points.iter().enumerate().skip(1) {
        let d = sq_dist(p, &c);
        if farther(d, p, start_d, &points[start]) {
            start = i;
            start_d = d;
        }
    }

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = start;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let cp = points[current];
        let mut next: Option<usize> = None;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            let d = sq_dist(&points[i], &cp);
            if d < min_d[i] {
                min_d[i] = d;
            }
            next = match next {
                None => Some(i),
                Some(b) if farther(min_d[i], &points[i], min_d[b], &points[b]) => Some(i),
                keep => keep,
            };
        }
        current = next.expect("fewer than m points remain");
    }
    Ok(selected)
}

/// For each query, the `k` nearest pool points ordered by distance (ties on
/// coordinates). Any neighbor farther than `radius` is replaced by the
/// query's nearest pool point, so every query yields exactly `k` indices.
///
/// Output is flattened: entries `q*k .. (q+1)*k` belong to query `q`.
pub fn knn_radius(
    queries: &[Point3],
    pool: &[Point3],
    k: usize,
    radius: f64,
) -> Result<Vec<usize>> {
    if pool.is_empty() {
        return Err(Error::invalid("neighbor pool is empty"));
    }
    if k == 0 || k > pool.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds pool of {} points",
            pool.len()
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let r2 = radius * radius;
    let mut out = Vec::with_capacity(queries.len() * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(pool.len());
    for q in queries {
        cand.clear();
        cand.extend(pool.iter().enumerate().map(|(i, p)| (sq_dist(p, q), i)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0)
                .then_with(|| lex_cmp(&pool[a.1], &pool[b.1]))
                .then(a.1.cmp(&b.1))
        };
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, cmp);
        }
        let nearest = &mut cand[..k];
        nearest.sort_unstable_by(cmp);
        let first = nearest[0].1;
        out.extend(nearest.iter().map(|&(d, i)| if d > r2 { first } else { i }));
    }
    Ok(out)
}
