use crate::autodiff::sq_dist;
use crate::error::{Error, Result};

use super::Point3;

/// Minimum-cost perfect matching on a square cost matrix (Hungarian
/// method with potentials). Returns `col[i]`, the column assigned to row `i`.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("assignment needs a square cost matrix"));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::invalid("assignment costs must be finite"));
    }
    // 1-based arrays; row 0 / column 0 are sentinels.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0; n];
    for j in 1..=n {
        col[owner[j] - 1] = j - 1;
    }
    Ok(col)
}

/// Reorders `candidates` so that `out[i]` is the candidate matched to
/// `slots[i]` under minimum total squared distance.
pub fn match_points(slots: &[Point3], candidates: &[Point3]) -> Result<Vec<Point3>> {
    if slots.len() != candidates.len() {
        return Err(Error::invalid(
            "matching needs equally many slots and candidates",
        ));
    }
    let cost: Vec<Vec<f64>> = slots
        .iter()
        .map(|p| candidates.iter().map(|q| sq_dist(p, q)).collect())
        .collect();
    Ok(min_cost_assignment(&cost)?
        .into_iter()
        .map(|j| candidates[j])
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_best(cost: &[Vec<f64>]) -> f64 {
        fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..cost.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.min(cost[row][j] + rec(cost, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(cost, 0, &mut vec![false; cost.len()])
    }

    #[test]
    fn assignment_is_optimal_on_small_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=6 {
            for _ in 0..10 {
                let cost: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..n).map(|_| rng.random_range(-1.0..5.0)).collect())
                    .collect();
                let col = min_cost_assignment(&cost).unwrap();
                let mut seen = col.clone();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                let total: f64 = col.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
                assert!((total - brute_best(&cost)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn matching_undoes_a_shuffle() {
        let pts: Vec<Point3> = (0..8).map(|i| [i as f64, (i * i) as f64, 0.0]).collect();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        assert_eq!(match_points(&pts, &shuffled).unwrap(), pts);
        assert!(match_points(&pts, &pts[1..]).is_err());
    }
}
