//! Point cloud to latent vector: two (downsample, vector self-attention)
//! stages followed by a latent head over the `N/16` surviving points.
//!
//! All blocks operate on batches: `B` clouds with the same point count are
//! stacked into one tall matrix, cloud `b` owning rows `b*P .. (b+1)*P`.
//! Neighbor indices are always global row indices into that stack.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::geometry::{farthest_point_sample, knn_radius, Point3, PointCloud};
use crate::nn::{BatchNorm, Linear, Mlp2, ParamStore, Session};
use crate::tensor::Matrix;

/// Neighborhood size and radius for one block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighborhood {
    pub k: usize,
    pub radius: f64,
}

impl Neighborhood {
    /// Caps `k` at the number of points available to the block.
    pub fn clamped(self, pool: usize) -> Neighborhood {
        Neighborhood {
            k: self.k.min(pool),
            radius: self.radius,
        }
    }
}

/// Rows `i*k .. (i+1)*k` all point at row `i`.
pub fn repeat_index(rows: usize, k: usize) -> Rc<[usize]> {
    (0..rows).flat_map(|i| std::iter::repeat_n(i, k)).collect()
}

/// Within-cloud kNN for every cloud of a batch, returned as global indices.
pub fn batch_neighbors(coords: &[Vec<Point3>], nb: Neighborhood) -> Result<Rc<[usize]>> {
    let mut out = Vec::new();
    let mut offset = 0;
    for pts in coords {
        out.extend(
            knn_radius(pts, pts, nb.k, nb.radius)?
                .into_iter()
                .map(|i| i + offset),
        );
        offset += pts.len();
    }
    Ok(out.into())
}

pub fn stack_coords(coords: &[Vec<Point3>]) -> Matrix {
    let all: Vec<Point3> = coords.iter().flatten().copied().collect();
    Matrix::from_rows(&all)
}

/// FPS to a quarter of the points, then a shared pointwise conv, batch
/// norm and ReLU over `[neighbor feature, neighbor - center]`, max-pooled
/// over each center's `k` neighbors.
#[derive(Clone, Debug)]
pub struct DownsampleBlock {
    pub conv: Linear,
    pub bn: BatchNorm,
    pub in_width: usize,
    pub out_width: usize,
}

impl DownsampleBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        DownsampleBlock {
            conv: Linear::new(store, &format!("{name}.conv"), in_width + 3, out_width, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_width),
            in_width,
            out_width,
        }
    }

    /// Returns the pooled center features and each cloud's center coordinates.
    pub fn forward(
        &self,
        s: &mut Session,
        feats: Var,
        coords: &[Vec<Point3>],
        nb: Neighborhood,
    ) -> Result<(Var, Vec<Vec<Point3>>)> {
        let width = s.value(feats).cols();
        if width != self.in_width {
            return Err(Error::invalid(format!(
                "downsample expects width {}, got {width}",
                self.in_width
            )));
        }
        let mut nbr_idx = Vec::new();
        let mut rel = Vec::new();
        let mut centers_out = Vec::with_capacity(coords.len());
        let mut offset = 0;
        for pts in coords {
            if pts.len() % 4 != 0 {
                return Err(Error::invalid(format!(
                    "downsample input of {} points is not divisible by 4",
                    pts.len()
                )));
            }
            let centers: Vec<Point3> = farthest_point_sample(pts, pts.len() / 4)?
                .into_iter()
                .map(|i| pts[i])
                .collect();
            let nbrs = knn_radius(&centers, pts, nb.k, nb.radius)?;
            for (c, hood) in centers.iter().zip(nbrs.chunks(nb.k)) {
                for &j in hood {
                    nbr_idx.push(j + offset);
                    let p = pts[j];
                    rel.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
                }
            }
            offset += pts.len();
            centers_out.push(centers);
        }
        let gathered = s.graph.gather(feats, nbr_idx.into());
        let rel = s.graph.constant(Matrix::from_rows(&rel));
        let x = s.graph.concat_cols(&[gathered, rel]);
        let h = self.conv.forward(s, x);
        let h = self.bn.forward(s, h);
        let h = s.graph.relu(h);
        Ok((s.graph.group_max(h, nb.k), centers_out))
    }
}

/// Vector self-attention over each point's neighborhood:
/// `sum_j softmax_j(gamma(phi(f_i) - phi(f_j)) + delta) * (alpha(f_j) + delta)`
/// with `delta = theta(x_i - x_j)` and the softmax taken per channel.
#[derive(Clone, Debug)]
pub struct VectorAttention {
    pub gamma: Mlp2,
    pub phi: Mlp2,
    pub alpha: Mlp2,
    pub theta: Mlp2,
    pub width: usize,
}

impl VectorAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        VectorAttention {
            gamma: Mlp2::new(store, &format!("{name}.gamma"), width, width, width, rng),
            phi: Mlp2::new(store, &format!("{name}.phi"), width, width, width, rng),
            alpha: Mlp2::new(store, &format!("{name}.alpha"), width, width, width, rng),
            theta: Mlp2::new(store, &format!("{name}.theta"), 3, width, width, rng),
            width,
        }
    }

    /// `pos` holds the `R x 3` coordinates (constant or differentiable);
    /// `nbrs` lists `k` global neighbor rows per point.
    pub fn forward(
        &self,
        s: &mut Session,
        feats: Var,
        pos: Var,
        nbrs: Rc<[usize]>,
        k: usize,
    ) -> Result<Var> {
        let (rows, width) = s.value(feats).shape();
        if width != self.width {
            return Err(Error::invalid(format!(
                "attention expects width {}, got {width}",
                self.width
            )));
        }
        if nbrs.len() != rows * k || s.value(pos).rows() != rows {
            return Err(Error::invalid(
                "attention neighbor table does not match the point count",
            ));
        }
        let centers = repeat_index(rows, k);
        let phi = self.phi.forward(s, feats);
        let alpha = self.alpha.forward(s, feats);

        let phi_i = s.graph.gather(phi, centers.clone());
        let phi_j = s.graph.gather(phi, nbrs.clone());
        let diff = s.graph.sub(phi_i, phi_j);

        let x_i = s.graph.gather(pos, centers);
        let x_j = s.graph.gather(pos, nbrs.clone());
        let rel = s.graph.sub(x_i, x_j);
        let delta = self.theta.forward(s, rel);

        let logits = self.gamma.forward(s, diff);
        let logits = s.graph.add(logits, delta);
        let weights = s.graph.group_softmax(logits, k);

        let alpha_j = s.graph.gather(alpha, nbrs);
        let values = s.graph.add(alpha_j, delta);
        let weighted = s.graph.mul(weights, values);
        Ok(s.graph.group_sum(weighted, k))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Channel-wise max over the `N/16` points.
    #[default]
    MaxPool,
    /// A shared linear map of each point to `t` values, concatenated.
    Projection,
}

#[derive(Clone, Debug)]
pub enum LatentHead {
    MaxPool,
    Projection { proj: Linear, per_point: usize },
}

/// Neighborhoods for the four encoder blocks, already clamped to the
/// available point counts.
#[derive(Clone, Copy, Debug)]
pub struct EncoderNeighborhoods {
    pub down1: Neighborhood,
    pub attn1: Neighborhood,
    pub down2: Neighborhood,
    pub attn2: Neighborhood,
}

impl EncoderNeighborhoods {
    pub fn for_points(points: usize, nb: Neighborhood) -> Self {
        EncoderNeighborhoods {
            down1: nb.clamped(points),
            attn1: nb.clamped(points / 4),
            down2: nb.clamped(points / 4),
            attn2: nb.clamped(points / 16),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub down1: DownsampleBlock,
    pub attn1: VectorAttention,
    pub down2: DownsampleBlock,
    pub attn2: VectorAttention,
    pub head: LatentHead,
    pub neighborhoods: EncoderNeighborhoods,
    pub points: usize,
    pub latent_dim: usize,
}

pub struct EncoderOutput {
    /// `B x n` pre-normalization latent.
    pub latent: Var,
    /// `B*(N/16) x n` features of the downsampled cloud.
    pub features: Var,
    /// Downsampled coordinates of each cloud, in FPS order.
    pub centers: Vec<Vec<Point3>>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        points: usize,
        input_width: usize,
        feature_dim: usize,
        latent_dim: usize,
        head: HeadMode,
        nb: Neighborhood,
        rng: &mut impl Rng,
    ) -> Self {
        let head = match head {
            HeadMode::MaxPool => LatentHead::MaxPool,
            HeadMode::Projection => {
                let per_point = (latent_dim / (points / 16)).max(1);
                LatentHead::Projection {
                    proj: Linear::new(store, "encoder.head", latent_dim, per_point, rng),
                    per_point,
                }
            }
        };
        Encoder {
            down1: DownsampleBlock::new(store, "encoder.down1", input_width, feature_dim, rng),
            attn1: VectorAttention::new(store, "encoder.attn1", feature_dim, rng),
            down2: DownsampleBlock::new(store, "encoder.down2", feature_dim, latent_dim, rng),
            attn2: VectorAttention::new(store, "encoder.attn2", latent_dim, rng),
            head,
            neighborhoods: EncoderNeighborhoods::for_points(points, nb),
            points,
            latent_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, clouds: &[&PointCloud]) -> Result<EncoderOutput> {
        if clouds.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for c in clouds {
            if c.len() != self.points || c.len() % 16 != 0 {
                return Err(Error::invalid(format!(
                    "encoder expects {} points (a multiple of 16), got {}",
                    self.points,
                    c.len()
                )));
            }
        }
        let coords: Vec<Vec<Point3>> = clouds.iter().map(|c| c.points().to_vec()).collect();
        let width = clouds[0].feature_width();
        let mut data = Vec::with_capacity(clouds.len() * self.points * width);
        for c in clouds {
            if c.feature_width() != width {
                return Err(Error::invalid(
                    "clouds in a batch must share a feature width",
                ));
            }
            data.extend_from_slice(c.features().data());
        }
        let feats = s
            .graph
            .constant(Matrix::from_vec(clouds.len() * self.points, width, data));

        let nbh = self.neighborhoods;
        let (f1, c1) = self.down1.forward(s, feats, &coords, nbh.down1)?;
        let pos1 = s.graph.constant(stack_coords(&c1));
        let nbrs1 = batch_neighbors(&c1, nbh.attn1)?;
        let f1 = self.attn1.forward(s, f1, pos1, nbrs1, nbh.attn1.k)?;

        let (f2, c2) = self.down2.forward(s, f1, &c1, nbh.down2)?;
        let pos2 = s.graph.constant(stack_coords(&c2));
        let nbrs2 = batch_neighbors(&c2, nbh.attn2)?;
        let f2 = self.attn2.forward(s, f2, pos2, nbrs2, nbh.attn2.k)?;

        let rows = self.points / 16;
        let latent = match &self.head {
            LatentHead::MaxPool => s.graph.group_max(f2, rows),
            LatentHead::Projection { proj, per_point } => {
                let p = proj.forward(s, f2);
                let used = rows * per_point;
                let flat = s.graph.reshape(p, clouds.len(), used);
                if used < self.latent_dim {
                    let pad = s
                        .graph
                        .constant(Matrix::zeros(clouds.len(), self.latent_dim - used));
                    s.graph.concat_cols(&[flat, pad])
                } else {
                    flat
                }
            }
        };
        Ok(EncoderOutput {
            latent,
            features: f2,
            centers: c2,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::from_points(
            (0..n)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect(),
        )
        .unwrap()
    }

    fn features(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            n,
            d,
            (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Straight-line evaluation of the attention formula for one point.
    fn attention_oracle(
        store: &ParamStore,
        a: &VectorAttention,
        f: &Matrix,
        x: &[Point3],
        i: usize,
        hood: &[usize],
    ) -> Vec<f64> {
        let mlp = |m: &Mlp2, v: &[f64]| -> Vec<f64> {
            let lin = |l: &Linear, v: &[f64]| -> Vec<f64> {
                let (w, b) = (store.get(l.weight), store.get(l.bias));
                (0..l.fan_out)
                    .map(|o| b.get(0, o) + (0..l.fan_in).map(|k| v[k] * w.get(k, o)).sum::<f64>())
                    .collect()
            };
            let h: Vec<f64> = lin(&m.first, v).into_iter().map(|z| z.max(0.0)).collect();
            lin(&m.second, &h)
        };
        let d = a.width;
        let phi_i = mlp(&a.phi, f.row(i));
        let mut logits = Vec::new();
        let mut values = Vec::new();
        for &j in hood {
            let rel = [x[i][0] - x[j][0], x[i][1] - x[j][1], x[i][2] - x[j][2]];
            let delta = mlp(&a.theta, &rel);
            let phi_j = mlp(&a.phi, f.row(j));
            let diff: Vec<f64> = (0..d).map(|c| phi_i[c] - phi_j[c]).collect();
            let g = mlp(&a.gamma, &diff);
            logits.push((0..d).map(|c| g[c] + delta[c]).collect::<Vec<_>>());
            let al = mlp(&a.alpha, f.row(j));
            values.push((0..d).map(|c| al[c] + delta[c]).collect::<Vec<_>>());
        }
        (0..d)
            .map(|c| {
                let z: f64 = logits.iter().map(|l| l[c].exp()).sum();
                logits
                    .iter()
                    .zip(&values)
                    .map(|(l, v)| l[c].exp() / z * v[c])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn attention_matches_the_formula_on_a_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let attn = VectorAttention::new(&mut store, "a", 2, &mut rng);
        let cloud = random_cloud(3, 1);
        let f = features(3, 2, 2);
        let nb = Neighborhood { k: 3, radius: 10.0 };
        let nbrs = batch_neighbors(&[cloud.points().to_vec()], nb).unwrap();
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(f.clone());
        let pv = s.graph.constant(cloud.coord_matrix());
        let out = attn.forward(&mut s, fv, pv, nbrs.clone(), 3).unwrap();
        for i in 0..3 {
            let want = attention_oracle(
                &store,
                &attn,
                &f,
                cloud.points(),
                i,
                &nbrs[i * 3..i * 3 + 3],
            );
            for (c, w) in want.iter().enumerate() {
                assert!((s.value(out).get(i, c) - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_neighbor_attention_is_alpha_plus_theta_of_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let attn = VectorAttention::new(&mut store, "a", 4, &mut rng);
        let cloud = random_cloud(5, 4);
        let f = features(5, 4, 5);
        let nbrs = batch_neighbors(
            &[cloud.points().to_vec()],
            Neighborhood { k: 1, radius: 1.0 },
        )
        .unwrap();
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(f);
        let pv = s.graph.constant(cloud.coord_matrix());
        let out = attn.forward(&mut s, fv, pv, nbrs, 1).unwrap();
        let alpha = attn.alpha.forward(&mut s, fv);
        let zero = s.graph.constant(Matrix::zeros(1, 3));
        let theta0 = attn.theta.forward(&mut s, zero);
        for i in 0..5 {
            for c in 0..4 {
                let want = s.value(alpha).get(i, c) + s.value(theta0).get(0, c);
                assert!((s.value(out).get(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_ignores_global_translation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let attn = VectorAttention::new(&mut store, "a", 3, &mut rng);
        let cloud = random_cloud(12, 6);
        let moved: Vec<Point3> = cloud
            .points()
            .iter()
            .map(|p| [p[0] + 0.3, p[1] - 0.2, p[2] + 0.1])
            .collect();
        let f = features(12, 3, 7);
        let nb = Neighborhood { k: 4, radius: 10.0 };
        let run = |pts: &[Point3]| {
            let nbrs = batch_neighbors(&[pts.to_vec()], nb).unwrap();
            let mut s = Session::new(&store, false);
            let fv = s.graph.constant(f.clone());
            let pv = s.graph.constant(Matrix::from_rows(pts));
            let out = attn.forward(&mut s, fv, pv, nbrs, 4).unwrap();
            s.value(out).clone()
        };
        let (a, b) = (run(cloud.points()), run(&moved));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rejects_width_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let attn = VectorAttention::new(&mut store, "a", 3, &mut rng);
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(Matrix::zeros(2, 4));
        let pv = s.graph.constant(Matrix::zeros(2, 3));
        assert!(attn.forward(&mut s, fv, pv, vec![0, 1].into(), 1).is_err());
    }

    #[test]
    fn downsample_keeps_a_quarter_of_the_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = DownsampleBlock::new(&mut store, "d", 1, 8, &mut rng);
        let cloud = random_cloud(16, 2);
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(cloud.features().clone());
        let (out, centers) = block
            .forward(
                &mut s,
                fv,
                &[cloud.points().to_vec()],
                Neighborhood { k: 4, radius: 0.25 },
            )
            .unwrap();
        assert_eq!(s.value(out).shape(), (4, 8));
        assert_eq!(centers[0].len(), 4);
        assert!(centers[0].iter().all(|c| cloud.points().contains(c)));
    }

    #[test]
    fn downsample_with_zero_conv_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = DownsampleBlock::new(&mut store, "d", 1, 8, &mut rng);
        *store.get_mut(block.conv.weight) = Matrix::zeros(4, 8);
        *store.get_mut(block.conv.bias) = Matrix::zeros(1, 8);
        let cloud = random_cloud(32, 2);
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(cloud.features().clone());
        let (out, _) = block
            .forward(
                &mut s,
                fv,
                &[cloud.points().to_vec()],
                Neighborhood { k: 8, radius: 0.25 },
            )
            .unwrap();
        assert!(s.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn downsample_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = DownsampleBlock::new(&mut store, "d", 1, 8, &mut rng);
        let cloud = random_cloud(18, 2);
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(cloud.features().clone());
        assert!(block
            .forward(
                &mut s,
                fv,
                &[cloud.points().to_vec()],
                Neighborhood { k: 4, radius: 0.25 }
            )
            .is_err());
        let cloud = random_cloud(8, 2);
        let fv = s.graph.constant(cloud.features().clone());
        assert!(block
            .forward(
                &mut s,
                fv,
                &[cloud.points().to_vec()],
                Neighborhood { k: 9, radius: 0.25 }
            )
            .is_err());
    }

    #[test]
    fn downsample_is_equivariant_to_point_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let block = DownsampleBlock::new(&mut store, "d", 2, 6, &mut rng);
        let base = random_cloud(32, 3);
        let cloud = PointCloud::new(base.points().to_vec(), features(32, 2, 4)).unwrap();
        let order: Vec<usize> = (0..32).rev().collect();
        let perm = cloud.permuted(&order);
        let run = |c: &PointCloud| {
            let mut s = Session::new(&store, false);
            let fv = s.graph.constant(c.features().clone());
            let (out, centers) = block
                .forward(
                    &mut s,
                    fv,
                    &[c.points().to_vec()],
                    Neighborhood { k: 6, radius: 0.3 },
                )
                .unwrap();
            (s.value(out).clone(), centers.into_iter().next().unwrap())
        };
        let (fa, ca) = run(&cloud);
        let (fb, cb) = run(&perm);
        for (i, c) in ca.iter().enumerate() {
            let j = cb.iter().position(|d| d == c).expect("same center set");
            for k in 0..6 {
                assert!((fa.get(i, k) - fb.get(j, k)).abs() < 1e-12);
            }
        }
    }
}
