//! Received vector to point cloud: latent expansion, coarse coordinates,
//! attention refinement, refined coordinates and two offset upsampling
//! stages.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::Var;
use crate::encoder::{batch_neighbors, Neighborhood, VectorAttention};
use crate::error::{Error, Result};
use crate::geometry::Point3;
use crate::nn::{fan_in_uniform, Linear, Mlp2, ParamId, ParamStore, Session};
use crate::tensor::Matrix;

pub const BRANCHES: usize = 4;

/// Unit-stride transposed convolution from one position with `n` channels
/// to `rows` positions with `n` channels, followed by ReLU.
#[derive(Clone, Debug)]
pub struct LatentExpand {
    /// `n x (rows*n)`; column `m*n + c` produces channel `c` of position `m`.
    pub kernel: ParamId,
    /// Per output channel, shared by all positions.
    pub bias: ParamId,
    pub rows: usize,
    pub width: usize,
}

impl LatentExpand {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        rows: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let kernel = store.add(
            format!("{name}.kernel"),
            fan_in_uniform(width, rows * width, width, rng),
            true,
        );
        let bias = store.add(
            format!("{name}.bias"),
            fan_in_uniform(1, width, width, rng),
            true,
        );
        LatentExpand {
            kernel,
            bias,
            rows,
            width,
        }
    }

    /// `y` is `B x n`; the result is `B*rows x n`.
    pub fn forward(&self, s: &mut Session, y: Var) -> Result<Var> {
        let (batch, width) = s.value(y).shape();
        if width != self.width {
            return Err(Error::invalid(format!(
                "latent expansion expects length {}, got {width}",
                self.width
            )));
        }
        let k = s.param(self.kernel);
        let b = s.param(self.bias);
        let h = s.graph.matmul(y, k);
        let h = s.graph.reshape(h, batch * self.rows, self.width);
        let h = s.graph.add_bias(h, b);
        Ok(s.graph.relu(h))
    }
}

/// Rowwise `R^n -> R^3` coordinate head.
#[derive(Clone, Debug)]
pub struct CoordRecon {
    pub mlp: Mlp2,
}

impl CoordRecon {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        CoordRecon {
            mlp: Mlp2::new(store, name, width, hidden, 3, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, feats: Var) -> Result<Var> {
        let width = s.value(feats).cols();
        if width != self.mlp.first.fan_in {
            return Err(Error::invalid(format!(
                "coordinate head expects width {}, got {width}",
                self.mlp.first.fan_in
            )));
        }
        Ok(self.mlp.forward(s, feats))
    }
}

#[derive(Clone, Debug)]
pub struct UpsampleBranch {
    /// Offset head, squashed by tanh.
    pub offset: Mlp2,
    /// Feature head, followed by ReLU.
    pub feature: Mlp2,
}

/// Each point spawns [`BRANCHES`] children at `x + scale * tanh(O(f))`
/// carrying features `relu(G(f))`.
#[derive(Clone, Debug)]
pub struct OffsetUpsampler {
    pub branches: Vec<UpsampleBranch>,
    pub scale: f64,
    pub width: usize,
}

impl OffsetUpsampler {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let branches = (0..BRANCHES)
            .map(|l| UpsampleBranch {
                offset: Mlp2::new(
                    store,
                    &format!("{name}.branch{l}.offset"),
                    width,
                    width,
                    3,
                    rng,
                ),
                feature: Mlp2::new(
                    store,
                    &format!("{name}.branch{l}.feature"),
                    width,
                    width,
                    width,
                    rng,
                ),
            })
            .collect();
        OffsetUpsampler {
            branches,
            scale,
            width,
        }
    }

    /// Output rows are parent-major: child `l` of parent `i` is row `i*L + l`.
    pub fn forward(&self, s: &mut Session, coords: Var, feats: Var) -> Result<(Var, Var)> {
        let (rows, width) = s.value(feats).shape();
        if width != self.width {
            return Err(Error::invalid(format!(
                "upsampler expects width {}, got {width}",
                self.width
            )));
        }
        if s.value(coords).shape() != (rows, 3) {
            return Err(Error::invalid(
                "upsampler coordinates do not match features",
            ));
        }
        let mut child_coords = Vec::with_capacity(BRANCHES);
        let mut child_feats = Vec::with_capacity(BRANCHES);
        for branch in &self.branches {
            let o = branch.offset.forward(s, feats);
            let o = s.graph.tanh(o);
            let o = s.graph.affine(o, self.scale, 0.0);
            child_coords.push(s.graph.add(coords, o));
            let g = branch.feature.forward(s, feats);
            child_feats.push(s.graph.relu(g));
        }
        let interleave: Rc<[usize]> = (0..rows)
            .flat_map(|i| (0..BRANCHES).map(move |l| l * rows + i))
            .collect();
        let c = s.graph.concat_rows(&child_coords);
        let f = s.graph.concat_rows(&child_feats);
        let c = s.graph.gather(c, interleave.clone());
        let f = s.graph.gather(f, interleave);
        Ok((c, f))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub expand: LatentExpand,
    pub coarse: CoordRecon,
    pub refine: VectorAttention,
    pub refined: CoordRecon,
    /// Maps the refined features from width `n` to `d_f` ahead of upsampling.
    pub adapter: Linear,
    pub up1: OffsetUpsampler,
    pub up2: OffsetUpsampler,
    pub refine_neighborhood: Neighborhood,
    /// When off, `F'' = F'` and `X''` is read straight off the expansion.
    pub refine_enabled: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct Reconstruction {
    pub batch: usize,
    pub expanded: Var,
    pub coarse: Var,
    pub refined_features: Var,
    pub refined: Var,
}

pub struct DecoderOutput {
    pub expanded: Var,
    /// `X'`, `B*(N/16) x 3`.
    pub coarse: Var,
    /// `F''`.
    pub refined_features: Var,
    /// Upsampling parents: `X''`, or the supplied anchors.
    pub refined: Var,
    /// Stage-1 output, `B*(N/4)` rows.
    pub mid_coords: Var,
    pub points: Var,
    pub features: Var,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        points: usize,
        latent_dim: usize,
        feature_dim: usize,
        coord_hidden: usize,
        scale: f64,
        nb: Neighborhood,
        rng: &mut impl Rng,
    ) -> Self {
        let rows = points / 16;
        Decoder {
            expand: LatentExpand::new(store, "decoder.expand", rows, latent_dim, rng),
            coarse: CoordRecon::new(store, "decoder.coarse", latent_dim, coord_hidden, rng),
            refine: VectorAttention::new(store, "decoder.refine", latent_dim, rng),
            refined: CoordRecon::new(store, "decoder.refined", latent_dim, coord_hidden, rng),
            adapter: Linear::new(store, "decoder.adapter", latent_dim, feature_dim, rng),
            up1: OffsetUpsampler::new(store, "decoder.up1", feature_dim, scale, rng),
            up2: OffsetUpsampler::new(store, "decoder.up2", feature_dim, scale, rng),
            refine_neighborhood: nb.clamped(rows),
            refine_enabled: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.expand.rows
    }

    /// One refinement pass over `(coords, feats)`; neighborhoods come from
    /// the current coordinate values.
    pub fn refine_features(
        &self,
        s: &mut Session,
        coords: Var,
        feats: Var,
        batch: usize,
    ) -> Result<Var> {
        let rows = self.rows();
        let m = s.value(coords);
        let per_cloud: Vec<Vec<Point3>> = (0..batch)
            .map(|b| {
                (b * rows..(b + 1) * rows)
                    .map(|r| [m.get(r, 0), m.get(r, 1), m.get(r, 2)])
                    .collect()
            })
            .collect();
        let nb = self.refine_neighborhood;
        let nbrs = batch_neighbors(&per_cloud, nb)?;
        self.refine.forward(s, feats, coords, nbrs, nb.k)
    }

    /// Latent expansion, coarse coordinates, refinement and refined
    /// coordinates for a `B x n` received batch.
    pub fn reconstruct(&self, s: &mut Session, y: Var) -> Result<Reconstruction> {
        let batch = s.value(y).rows();
        let expanded = self.expand.forward(s, y)?;
        let coarse = self.coarse.forward(s, expanded)?;
        let refined_features = if self.refine_enabled {
            self.refine_features(s, coarse, expanded, batch)?
        } else {
            expanded
        };
        let refined = self.refined.forward(s, refined_features)?;
        Ok(Reconstruction {
            batch,
            expanded,
            coarse,
            refined_features,
            refined,
        })
    }

    /// Both upsampling stages, seeded at `parents` (normally `X''`).
    pub fn upsample(
        &self,
        s: &mut Session,
        rec: Reconstruction,
        parents: Var,
    ) -> Result<DecoderOutput> {
        if s.value(parents).shape() != (rec.batch * self.rows(), 3) {
            return Err(Error::invalid("upsampling parents do not match the batch"));
        }
        let h = self.adapter.forward(s, rec.refined_features);
        let (mid_coords, mid_feats) = self.up1.forward(s, parents, h)?;
        let (points, features) = self.up2.forward(s, mid_coords, mid_feats)?;
        Ok(DecoderOutput {
            expanded: rec.expanded,
            coarse: rec.coarse,
            refined_features: rec.refined_features,
            refined: parents,
            mid_coords,
            points,
            features,
        })
    }

    /// Decodes a `B x n` received batch. `anchors`, row-aligned with `X''`,
    /// replace the refined coordinates as upsampling parents.
    pub fn forward(
        &self,
        s: &mut Session,
        y: Var,
        anchors: Option<&Matrix>,
    ) -> Result<DecoderOutput> {
        let rec = self.reconstruct(s, y)?;
        let parents = match anchors {
            None => rec.refined,
            Some(a) => {
                if a.shape() != (rec.batch * self.rows(), 3) {
                    return Err(Error::invalid("anchor coordinates do not match the batch"));
                }
                s.graph.constant(a.clone())
            }
        };
        self.upsample(s, rec, parents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
    }

    #[test]
    fn expansion_shape_and_zero_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let ex = LatentExpand::new(&mut store, "e", 16, 32, &mut rng);
        let mut s = Session::new(&store, false);
        let y = s.graph.constant(random(1, 32, 1));
        let f = ex.forward(&mut s, y).unwrap();
        assert_eq!(s.value(f).shape(), (16, 32));

        *store.get_mut(ex.kernel) = Matrix::zeros(32, 16 * 32);
        *store.get_mut(ex.bias) = Matrix::zeros(1, 32);
        let mut s = Session::new(&store, false);
        let y = s.graph.constant(random(1, 32, 1));
        let f = ex.forward(&mut s, y).unwrap();
        assert!(s.value(f).data().iter().all(|&x| x == 0.0));
        let bad = s.graph.constant(random(1, 31, 1));
        assert!(ex.forward(&mut s, bad).is_err());
    }

    #[test]
    fn expansion_is_positively_homogeneous_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let ex = LatentExpand::new(&mut store, "e", 4, 6, &mut rng);
        *store.get_mut(ex.bias) = Matrix::zeros(1, 6);
        let y = random(1, 6, 3);
        let mut s = Session::new(&store, false);
        let a = s.graph.constant(y.clone());
        let b = s.graph.constant(y.map(|x| 2.5 * x));
        let fa = ex.forward(&mut s, a).unwrap();
        let fb = ex.forward(&mut s, b).unwrap();
        for (p, q) in s.value(fa).data().iter().zip(s.value(fb).data()) {
            assert!((2.5 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn coordinate_head_matches_matrix_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = CoordRecon::new(&mut store, "c", 5, 7, &mut rng);
        let f = random(3, 5, 5);
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(f.clone());
        let out = head.forward(&mut s, fv).unwrap();
        let (w1, b1) = (
            store.get(head.mlp.first.weight),
            store.get(head.mlp.first.bias),
        );
        let (w2, b2) = (
            store.get(head.mlp.second.weight),
            store.get(head.mlp.second.bias),
        );
        for r in 0..3 {
            let hidden: Vec<f64> = (0..7)
                .map(|h| {
                    (b1.get(0, h) + (0..5).map(|i| f.get(r, i) * w1.get(i, h)).sum::<f64>())
                        .max(0.0)
                })
                .collect();
            for c in 0..3 {
                let want = b2.get(0, c) + (0..7).map(|h| hidden[h] * w2.get(h, c)).sum::<f64>();
                assert!((s.value(out).get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coordinate_head_with_zero_weights_returns_the_bias_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let head = CoordRecon::new(&mut store, "c", 4, 6, &mut rng);
        *store.get_mut(head.mlp.first.weight) = Matrix::zeros(4, 6);
        *store.get_mut(head.mlp.first.bias) =
            Matrix::from_vec(1, 6, vec![0.5, -1.0, 0.2, 0.0, 1.0, -0.3]);
        let mut s = Session::new(&store, false);
        let fv = s.graph.constant(random(2, 4, 1));
        let out = head.forward(&mut s, fv).unwrap();
        let relu_b = [0.5, 0.0, 0.2, 0.0, 1.0, 0.0];
        let (w2, b2) = (
            store.get(head.mlp.second.weight),
            store.get(head.mlp.second.bias),
        );
        for c in 0..3 {
            let want = b2.get(0, c) + (0..6).map(|h| relu_b[h] * w2.get(h, c)).sum::<f64>();
            assert!((s.value(out).get(0, c) - want).abs() < 1e-12);
            assert_eq!(s.value(out).get(0, c), s.value(out).get(1, c));
        }
    }

    #[test]
    fn upsampler_children_stay_within_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let up = OffsetUpsampler::new(&mut store, "u", 8, 0.1, &mut rng);
        // large weights push tanh into saturation
        for e in store.entries_mut() {
            e.value = e.value.map(|x| x * 50.0);
        }
        let parents = random(16, 3, 7);
        let mut s = Session::new(&store, false);
        let c = s.graph.constant(parents.clone());
        let f = s.graph.constant(random(16, 8, 8));
        let (cc, ff) = up.forward(&mut s, c, f).unwrap();
        assert_eq!(s.value(cc).rows(), 64);
        assert_eq!(s.value(ff).shape(), (64, 8));
        for r in 0..64 {
            for a in 0..3 {
                assert!((s.value(cc).get(r, a) - parents.get(r / 4, a)).abs() <= 0.1 + 1e-12);
            }
        }
    }

    #[test]
    fn zero_offset_heads_keep_children_on_the_parent() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let up = OffsetUpsampler::new(&mut store, "u", 4, 0.1, &mut rng);
        for b in &up.branches {
            *store.get_mut(b.offset.second.weight) = Matrix::zeros(4, 3);
            *store.get_mut(b.offset.second.bias) = Matrix::zeros(1, 3);
        }
        let parents = random(5, 3, 1);
        let mut s = Session::new(&store, false);
        let c = s.graph.constant(parents.clone());
        let f = s.graph.constant(random(5, 4, 2));
        let (cc, _) = up.forward(&mut s, c, f).unwrap();
        for r in 0..20 {
            assert_eq!(s.value(cc).row(r), parents.row(r / 4));
        }
    }

    fn zero_mlp(store: &mut ParamStore, m: &Mlp2) {
        for l in [&m.first, &m.second] {
            *store.get_mut(l.weight) = Matrix::zeros(l.fan_in, l.fan_out);
            *store.get_mut(l.bias) = Matrix::zeros(1, l.fan_out);
        }
    }

    #[test]
    fn identity_attention_refines_to_the_neighbor_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let nb = Neighborhood { k: 3, radius: 10.0 };
        let dec = Decoder::new(&mut store, 64, 4, 4, 8, 0.1, nb, &mut rng);
        let att = dec.refine.clone();
        for m in [&att.gamma, &att.phi, &att.theta] {
            zero_mlp(&mut store, m);
        }
        zero_mlp(&mut store, &att.alpha);
        *store.get_mut(att.alpha.first.weight) = Matrix::identity(4);
        *store.get_mut(att.alpha.second.weight) = Matrix::identity(4);

        let coords = Matrix::from_rows(&[
            [0.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [0.0, 0.3, 0.0],
            [1.0, 1.0, 1.0],
        ]);
        let feats = random(4, 4, 10).map(f64::abs);
        let mut s = Session::new(&store, false);
        let c = s.graph.constant(coords.clone());
        let f = s.graph.constant(feats.clone());
        let out = dec.refine_features(&mut s, c, f, 1).unwrap();

        let pts: Vec<Point3> = (0..4)
            .map(|r| [coords.get(r, 0), coords.get(r, 1), coords.get(r, 2)])
            .collect();
        let nbrs = crate::geometry::knn_radius(&pts, &pts, 3, 10.0).unwrap();
        for i in 0..4 {
            for ch in 0..4 {
                let want = nbrs[i * 3..i * 3 + 3]
                    .iter()
                    .map(|&j| feats.get(j, ch))
                    .sum::<f64>()
                    / 3.0;
                assert!((s.value(out).get(i, ch) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decode_produces_exactly_n_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let dec = Decoder::new(
            &mut store,
            256,
            32,
            32,
            128,
            0.1,
            Neighborhood {
                k: 16,
                radius: 0.25,
            },
            &mut rng,
        );
        let mut s = Session::new(&store, false);
        let y = s.graph.constant(random(2, 32, 12));
        let out = dec.forward(&mut s, y, None).unwrap();
        assert_eq!(s.value(out.coarse).shape(), (32, 3));
        assert_eq!(s.value(out.mid_coords).shape(), (128, 3));
        assert_eq!(s.value(out.points).shape(), (512, 3));
        assert_eq!(s.value(out.features).shape(), (512, 32));
    }

    #[test]
    fn anchors_replace_both_coordinate_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let dec = Decoder::new(
            &mut store,
            32,
            8,
            8,
            16,
            0.1,
            Neighborhood { k: 2, radius: 1.0 },
            &mut rng,
        );
        let anchors = random(2, 3, 14);
        let mut s = Session::new(&store, false);
        let y = s.graph.constant(random(1, 8, 15));
        let out = dec.forward(&mut s, y, Some(&anchors)).unwrap();
        assert_eq!(s.value(out.refined), &anchors);
        assert!(dec.forward(&mut s, y, Some(&random(3, 3, 1))).is_err());
    }
}
