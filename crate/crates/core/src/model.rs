//! The end-to-end transmitter/receiver pair and its configuration.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::channel::{awgn_noise, codeword_gain, noise_variance, unpack_complex, NormalizerState};
use crate::decoder::{Decoder, DecoderOutput};
use crate::encoder::{Encoder, EncoderOutput, HeadMode, Neighborhood};
use crate::error::{Error, Result};
use crate::geometry::{match_points, Point3, PointCloud};
use crate::nn::{ParamStore, Session};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Points per cloud `N`, a multiple of 16.
    pub points: usize,
    /// Real channel dimension `n`.
    pub latent_dim: usize,
    pub feature_dim: usize,
    /// Width of the per-point input attributes.
    pub input_width: usize,
    pub neighborhood: Neighborhood,
    pub coord_hidden: usize,
    pub upsample_scale: f64,
    pub head: HeadMode,
    pub refine: bool,
    /// Average power per complex symbol.
    pub power: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            points: 256,
            latent_dim: 32,
            feature_dim: 32,
            input_width: 1,
            neighborhood: Neighborhood {
                k: 16,
                radius: 0.25,
            },
            coord_hidden: 128,
            upsample_scale: 0.1,
            head: HeadMode::MaxPool,
            refine: true,
            power: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 16 || !self.points.is_multiple_of(16) {
            return Err(Error::invalid(format!(
                "point count must be a positive multiple of 16, got {}",
                self.points
            )));
        }
        if self.latent_dim < 2 || !self.latent_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "latent dimension must be even and >= 2, got {}",
                self.latent_dim
            )));
        }
        if self.feature_dim == 0 || self.input_width == 0 || self.coord_hidden == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if self.neighborhood.k == 0 || !(self.neighborhood.radius > 0.0) {
            return Err(Error::invalid(
                "neighborhood needs k >= 1 and a positive radius",
            ));
        }
        if !(self.upsample_scale > 0.0) || !(self.power > 0.0) {
            return Err(Error::invalid(
                "upsampling scale and power must be positive",
            ));
        }
        if self.head == HeadMode::Projection && self.points / 16 > self.latent_dim {
            return Err(Error::invalid(format!(
                "projection head needs latent dimension >= N/16 = {}, got {}",
                self.points / 16,
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Per-point width `t` of the projection head, `(N/16) t <= n`.
    pub fn projection_width(&self) -> usize {
        self.latent_dim / (self.points / 16)
    }

    pub fn anchor_rows(&self) -> usize {
        self.points / 16
    }
}

/// Everything one cloud went through on its way across the link.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub latent: Vec<f64>,
    pub codeword: Vec<f64>,
    /// `X*`, the encoder's downsampled coordinates.
    pub centers: Vec<Point3>,
    pub coarse: Vec<Point3>,
    pub refined: Vec<Point3>,
    pub mid: Vec<Point3>,
    pub points: Vec<Point3>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = Encoder::new(
            &mut store,
            c.points,
            c.input_width,
            c.feature_dim,
            c.latent_dim,
            c.head,
            c.neighborhood,
            &mut rng,
        );
        let mut decoder = Decoder::new(
            &mut store,
            c.points,
            c.latent_dim,
            c.feature_dim,
            c.coord_hidden,
            c.upsample_scale,
            c.neighborhood,
            &mut rng,
        );
        decoder.refine_enabled = c.refine;
        Ok(Model {
            config,
            store,
            encoder,
            decoder,
        })
    }

    pub fn encode_graph(&self, s: &mut Session, clouds: &[&PointCloud]) -> Result<EncoderOutput> {
        for c in clouds {
            if c.feature_width() != self.config.input_width {
                return Err(Error::invalid(format!(
                    "model expects input width {}, got {}",
                    self.config.input_width,
                    c.feature_width()
                )));
            }
        }
        self.encoder.forward(s, clouds)
    }

    /// `z = g (z~ - mean) / deviation` with the statistics held constant.
    pub fn codeword_graph(
        &self,
        s: &mut Session,
        latent: Var,
        state: &NormalizerState,
    ) -> Result<Var> {
        state.check()?;
        let g = codeword_gain(self.config.power);
        Ok(s.graph.affine(
            latent,
            g / state.deviation,
            -g * state.mean / state.deviation,
        ))
    }

    /// Mean over the batch of the per-cloud Chamfer distance to `targets`.
    pub fn chamfer_loss(s: &mut Session, points: Var, targets: Rc<Matrix>, batch: usize) -> Var {
        let per_cloud = s.graph.chamfer(points, targets, batch);
        s.graph.mean(per_cloud)
    }

    /// Latent vectors of a batch, evaluation mode.
    pub fn encode_batch(&self, clouds: &[&PointCloud]) -> Result<Matrix> {
        let mut s = Session::new(&self.store, false);
        let out = self.encode_graph(&mut s, clouds)?;
        Ok(s.value(out.latent).clone())
    }

    pub fn encode(&self, cloud: &PointCloud) -> Result<Vec<f64>> {
        Ok(self.encode_batch(&[cloud])?.into_vec())
    }

    /// Received vector to point coordinates, evaluation mode.
    pub fn decode(&self, received: &[f64]) -> Result<Vec<Point3>> {
        if received.len() != self.config.latent_dim {
            return Err(Error::invalid(format!(
                "received vector has length {}, expected {}",
                received.len(),
                self.config.latent_dim
            )));
        }
        let mut s = Session::new(&self.store, false);
        let y = s
            .graph
            .constant(Matrix::from_vec(1, received.len(), received.to_vec()));
        let out = self.decoder.forward(&mut s, y, None)?;
        Ok(rows_to_points(s.value(out.points), 0..self.config.points))
    }

    /// Full link for a batch under evaluation mode. `noise` is a
    /// `B x n` matrix added to the codewords; with `anchor_bits`, `X*` is
    /// quantized, matched to the rows of `X''` and used in its place.
    pub fn transmit(
        &self,
        clouds: &[&PointCloud],
        state: &NormalizerState,
        noise: &Matrix,
        anchor_bits: Option<u32>,
    ) -> Result<Vec<Transmission>> {
        let batch = clouds.len();
        if noise.shape() != (batch, self.config.latent_dim) {
            return Err(Error::invalid("noise matrix does not match the batch"));
        }
        let mut s = Session::new(&self.store, false);
        let enc = self.encode_graph(&mut s, clouds)?;
        let z = self.codeword_graph(&mut s, enc.latent, state)?;
        let w = s.graph.constant(noise.clone());
        let y = s.graph.add(z, w);
        let rec = self.decoder.reconstruct(&mut s, y)?;
        let rows = self.config.anchor_rows();
        let parents = match anchor_bits {
            None => rec.refined,
            Some(bits) => {
                let refined = s.value(rec.refined).clone();
                let mut anchors = Vec::with_capacity(batch * rows);
                for (b, centers) in enc.centers.iter().enumerate() {
                    let quantized: Vec<Point3> =
                        centers.iter().map(|p| quantize_point(p, bits)).collect();
                    let slots = rows_to_points(&refined, b * rows..(b + 1) * rows);
                    anchors.extend(match_points(&slots, &quantized)?);
                }
                s.graph.constant(Matrix::from_rows(&anchors))
            }
        };
        let dec = self.decoder.upsample(&mut s, rec, parents)?;
        Ok(self.collect(&s, &enc, z, &dec, batch))
    }

    fn collect(
        &self,
        s: &Session,
        enc: &EncoderOutput,
        z: Var,
        dec: &DecoderOutput,
        batch: usize,
    ) -> Vec<Transmission> {
        let (rows, pts) = (self.config.anchor_rows(), self.config.points);
        (0..batch)
            .map(|b| Transmission {
                latent: s.value(enc.latent).row(b).to_vec(),
                codeword: s.value(z).row(b).to_vec(),
                centers: enc.centers[b].clone(),
                coarse: rows_to_points(s.value(dec.coarse), b * rows..(b + 1) * rows),
                refined: rows_to_points(s.value(dec.refined), b * rows..(b + 1) * rows),
                mid: rows_to_points(s.value(dec.mid_coords), b * 4 * rows..(b + 1) * 4 * rows),
                points: rows_to_points(s.value(dec.points), b * pts..(b + 1) * pts),
            })
            .collect()
    }
}

pub fn rows_to_points(m: &Matrix, rows: std::ops::Range<usize>) -> Vec<Point3> {
    rows.map(|r| [m.get(r, 0), m.get(r, 1), m.get(r, 2)])
        .collect()
}

/// Uniform quantizer over `[0, 1]` with `2^bits` levels.
pub fn quantize_point(p: &Point3, bits: u32) -> Point3 {
    let levels = ((1u64 << bits) - 1) as f64;
    p.map(|x| (x.clamp(0.0, 1.0) * levels).round() / levels)
}

/// `B x n` real noise: `B * n/2` independent `CN(0, N0)` draws, unpacked.
pub fn channel_noise(
    batch: usize,
    dim: usize,
    snr_db: f64,
    power: f64,
    rng: &mut impl Rng,
) -> Matrix {
    let n0 = noise_variance(snr_db, power);
    Matrix::from_vec(
        batch,
        dim,
        unpack_complex(&awgn_noise(batch * dim / 2, n0, rng)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_dataset, DatasetSpec, ShapeFamily};

    fn tiny() -> ModelConfig {
        ModelConfig {
            points: 32,
            latent_dim: 8,
            feature_dim: 8,
            neighborhood: Neighborhood { k: 4, radius: 0.5 },
            coord_hidden: 16,
            ..ModelConfig::default()
        }
    }

    fn clouds(count: usize, points: usize) -> Vec<PointCloud> {
        generate_dataset(&DatasetSpec {
            family: ShapeFamily::Composite,
            count,
            points,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig {
            points: 100,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            latent_dim: 7,
            ..ModelConfig::default()
        }
        .validate()
        .is_err());
        let proj = ModelConfig {
            head: HeadMode::Projection,
            latent_dim: 8,
            ..ModelConfig::default()
        };
        assert!(proj.validate().is_err());
        let proj = ModelConfig {
            head: HeadMode::Projection,
            ..ModelConfig::default()
        };
        assert_eq!(proj.projection_width(), 2);
        assert!(proj.anchor_rows() * proj.projection_width() <= proj.latent_dim);
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = Model::new(tiny(), 1).unwrap();
        let b = Model::new(tiny(), 1).unwrap();
        let c = Model::new(tiny(), 2).unwrap();
        assert_eq!(a.store.fingerprint(), b.store.fingerprint());
        assert_ne!(a.store.fingerprint(), c.store.fingerprint());
    }

    #[test]
    fn decode_has_exact_cardinality() {
        let m = Model::new(tiny(), 0).unwrap();
        assert_eq!(m.decode(&[0.3; 8]).unwrap().len(), 32);
        assert!(m.decode(&[0.3; 6]).is_err());
    }

    #[test]
    fn transmission_shapes_and_noiseless_codeword_power() {
        let m = Model::new(tiny(), 0).unwrap();
        let data = clouds(3, 32);
        let refs: Vec<&PointCloud> = data.iter().collect();
        let latent = m.encode_batch(&refs).unwrap();
        let mut state = NormalizerState::default();
        state.update(latent.data()).unwrap();
        let out = m
            .transmit(&refs, &state, &Matrix::zeros(3, 8), None)
            .unwrap();
        assert_eq!(out.len(), 3);
        let t = &out[0];
        assert_eq!(
            (t.centers.len(), t.coarse.len(), t.mid.len(), t.points.len()),
            (2, 2, 8, 32)
        );
        // a normalizer fit on exactly these latents gives power 1 per complex symbol
        let energy: f64 = out
            .iter()
            .flat_map(|t| t.codeword.iter())
            .map(|x| x * x)
            .sum();
        assert!((energy / (3.0 * 4.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn hybrid_parents_are_quantized_centers() {
        let m = Model::new(tiny(), 0).unwrap();
        let data = clouds(2, 32);
        let refs: Vec<&PointCloud> = data.iter().collect();
        let mut state = NormalizerState::default();
        state.update(m.encode_batch(&refs).unwrap().data()).unwrap();
        let out = m
            .transmit(&refs, &state, &Matrix::zeros(2, 8), Some(4))
            .unwrap();
        for t in &out {
            let mut want: Vec<Point3> = t.centers.iter().map(|p| quantize_point(p, 4)).collect();
            let mut got = t.refined.clone();
            want.sort_by(|a, b| a.partial_cmp(b).unwrap());
            got.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, want);
        }
    }

    #[test]
    fn quantizer_levels() {
        assert_eq!(quantize_point(&[0.0, 1.0, 0.5], 1), [0.0, 1.0, 1.0]);
        let q = quantize_point(&[0.3, 0.3, 0.3], 16);
        assert!((q[0] - 0.3).abs() <= 0.5 / 65535.0);
    }

    #[test]
    fn noise_matrix_has_the_requested_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = channel_noise(1000, 64, 3.0, 1.0, &mut rng);
        let per_symbol = w.data().iter().map(|x| x * x).sum::<f64>() / (1000.0 * 32.0);
        assert!((per_symbol - noise_variance(3.0, 1.0)).abs() < 0.02 * noise_variance(3.0, 1.0));
        assert_eq!(
            channel_noise(2, 4, f64::INFINITY, 1.0, &mut rng),
            Matrix::zeros(2, 4)
        );
    }
}
