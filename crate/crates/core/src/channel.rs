//! Power normalization, real/complex packing and the complex AWGN channel.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Scalar moving mean and deviation of latent entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizerState {
    pub mean: f64,
    pub deviation: f64,
    pub momentum: f64,
    pub updates: u64,
    pub frozen: bool,
}

impl Default for NormalizerState {
    fn default() -> Self {
        NormalizerState::new(DEFAULT_MOMENTUM)
    }
}

impl NormalizerState {
    pub fn new(momentum: f64) -> Self {
        NormalizerState {
            mean: 0.0,
            deviation: 1.0,
            momentum,
            updates: 0,
            frozen: false,
        }
    }

    /// Folds one batch of latent entries into the moving statistics. The
    /// first update adopts the batch statistics outright.
    pub fn update(&mut self, latent: &[f64]) -> Result<()> {
        if self.frozen {
            return Err(Error::ContractViolation(
                "normalizer is frozen for inference".into(),
            ));
        }
        if latent.is_empty() {
            return Err(Error::invalid("empty latent batch"));
        }
        let n = latent.len() as f64;
        let mean = latent.iter().sum::<f64>() / n;
        let std = (latent.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        if self.updates == 0 {
            self.mean = mean;
            self.deviation = std;
        } else {
            let m = self.momentum;
            self.mean = (1.0 - m) * self.mean + m * mean;
            self.deviation = (1.0 - m) * self.deviation + m * std;
        }
        self.deviation = self.deviation.max(SIGMA_FLOOR);
        self.updates += 1;
        Ok(())
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn check(&self) -> Result<()> {
        if !(self.deviation > 0.0) || !self.deviation.is_finite() || !self.mean.is_finite() {
            return Err(Error::StateCorruption(format!(
                "mean = {}, deviation = {}",
                self.mean, self.deviation
            )));
        }
        Ok(())
    }
}

/// `(z - mean) / deviation`, elementwise.
pub fn power_normalize(latent: &[f64], state: &NormalizerState) -> Result<Vec<f64>> {
    state.check()?;
    Ok(latent
        .iter()
        .map(|x| (x - state.mean) / state.deviation)
        .collect())
}

/// Gain applied after normalization so each real entry carries `P/2` on
/// average, i.e. `E|z|^2 = nP/2` and each complex symbol carries `P`.
pub fn codeword_gain(power: f64) -> f64 {
    (power / 2.0).sqrt()
}

/// Normalized and scaled channel input for one latent vector.
pub fn codeword(latent: &[f64], state: &NormalizerState, power: f64) -> Result<Vec<f64>> {
    let g = codeword_gain(power);
    Ok(power_normalize(latent, state)?
        .into_iter()
        .map(|x| x * g)
        .collect())
}

/// Pairs `(z[2t], z[2t+1])` into `z[2t] + i z[2t+1]`.
pub fn pack_complex(z: &[f64]) -> Result<Vec<Complex64>> {
    if !z.len().is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "cannot pack odd length {} into complex symbols",
            z.len()
        )));
    }
    Ok(z.chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect())
}

pub fn unpack_complex(z: &[Complex64]) -> Vec<f64> {
    z.iter().flat_map(|c| [c.re, c.im]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// `10 log10(P / N0)`; `+inf` means a noiseless channel.
    pub snr_db: f64,
    pub power: f64,
    /// Real channel dimension `n`.
    pub dim: usize,
    pub seed: u64,
}

impl ChannelConfig {
    pub fn new(snr_db: f64, dim: usize, seed: u64) -> Self {
        ChannelConfig {
            snr_db,
            power: 1.0,
            dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || !self.dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "channel dimension must be even and >= 2, got {}",
                self.dim
            )));
        }
        if !(self.power > 0.0) {
            return Err(Error::invalid("power budget must be positive"));
        }
        if self.snr_db.is_nan() {
            return Err(Error::invalid("SNR is NaN"));
        }
        Ok(())
    }

    pub fn noiseless(&self) -> bool {
        self.snr_db == f64::INFINITY
    }

    /// Per-complex-symbol noise variance `N0 = P * 10^(-snr/10)`.
    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.snr_db, self.power)
    }
}

pub fn noise_variance(snr_db: f64, power: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        power * 10f64.powf(-snr_db / 10.0)
    }
}

/// `symbols` draws of circularly symmetric `CN(0, N0)`.
pub fn awgn_noise(symbols: usize, n0: f64, rng: &mut impl Rng) -> Vec<Complex64> {
    if n0 == 0.0 {
        return vec![Complex64::new(0.0, 0.0); symbols];
    }
    let normal = Normal::new(0.0, (n0 / 2.0).sqrt()).expect("finite noise deviation");
    (0..symbols)
        .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
        .collect()
}

/// `y = z + w` with `w ~ CN(0, N0)` i.i.d.
pub fn transmit_awgn(
    z: &[Complex64],
    cfg: &ChannelConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Complex64>> {
    cfg.validate()?;
    if z.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
        return Err(Error::invalid("channel input must be finite"));
    }
    let w = awgn_noise(z.len(), cfg.noise_variance(), rng);
    Ok(z.iter().zip(w).map(|(a, b)| a + b).collect())
}

/// Channel uses per point, `n / (2N)`.
pub fn cpp(dim: usize, points: usize) -> f64 {
    dim as f64 / (2.0 * points as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn first_update_on_a_constant_vector_floors_sigma() {
        let mut s = NormalizerState::default();
        s.update(&[1.0; 4]).unwrap();
        assert_eq!(s.mean, 1.0);
        assert_eq!(s.deviation, SIGMA_FLOOR);
    }

    #[test]
    fn unit_momentum_tracks_the_latest_batch() {
        let mut s = NormalizerState::new(1.0);
        s.update(&[0.0, 10.0]).unwrap();
        s.update(&[1.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.deviation, 1.0);
    }

    #[test]
    fn moving_statistics_converge_on_standard_normal_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut s = NormalizerState::default();
        for _ in 0..500 {
            let batch: Vec<f64> = (0..10_000).map(|_| normal.sample(&mut rng)).collect();
            s.update(&batch).unwrap();
        }
        assert!(
            s.mean.abs() < 0.05 && (s.deviation - 1.0).abs() < 0.05,
            "{s:?}"
        );
    }

    #[test]
    fn frozen_state_refuses_updates() {
        let mut s = NormalizerState::default();
        s.freeze();
        assert!(matches!(s.update(&[1.0]), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn normalize_follows_the_affine_formula() {
        let s = NormalizerState {
            mean: 0.0,
            deviation: 2.0,
            ..NormalizerState::default()
        };
        assert_eq!(power_normalize(&[2.0, -4.0], &s).unwrap(), vec![1.0, -2.0]);
        let s = NormalizerState {
            mean: 0.7,
            deviation: 3.0,
            ..NormalizerState::default()
        };
        assert_eq!(power_normalize(&[0.7; 3], &s).unwrap(), vec![0.0; 3]);
        let bad = NormalizerState {
            deviation: 0.0,
            ..NormalizerState::default()
        };
        assert!(matches!(
            power_normalize(&[1.0], &bad),
            Err(Error::StateCorruption(_))
        ));
    }

    #[test]
    fn packing_convention() {
        let z = pack_complex(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(z, vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, 4.0)]);
        assert!(pack_complex(&[1.0, 2.0, 3.0]).is_err());
    }

    proptest! {
        #[test]
        fn packing_is_an_isometric_bijection(z in prop::collection::vec(-1e3f64..1e3, 0..32)) {
            let z = if z.len() % 2 == 1 { z[1..].to_vec() } else { z };
            let c = pack_complex(&z).unwrap();
            prop_assert_eq!(unpack_complex(&c), z.clone());
            let real: f64 = z.iter().map(|x| x * x).sum();
            let cplx: f64 = c.iter().map(|x| x.norm_sqr()).sum();
            prop_assert!((real - cplx).abs() <= 1e-12 * real.max(1.0));
        }
    }

    #[test]
    fn noiseless_channel_is_identity() {
        let z = vec![Complex64::new(0.3, -1.0); 8];
        let cfg = ChannelConfig::new(f64::INFINITY, 16, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(transmit_awgn(&z, &cfg, &mut rng).unwrap(), z);
    }

    #[test]
    fn zero_db_means_unit_noise_power() {
        assert_eq!(ChannelConfig::new(0.0, 2, 0).noise_variance(), 1.0);
        assert!((ChannelConfig::new(10.0, 2, 0).noise_variance() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn empirical_noise_power_matches_n0() {
        for snr in [-5.0, 0.0, 10.0, 17.5] {
            let cfg = ChannelConfig::new(snr, 2, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(snr.to_bits());
            let z = vec![Complex64::new(0.0, 0.0); 100_000];
            let y = transmit_awgn(&z, &cfg, &mut rng).unwrap();
            let p = y.iter().map(|c| c.norm_sqr()).sum::<f64>() / y.len() as f64;
            let n0 = cfg.noise_variance();
            assert!((p - n0).abs() / n0 < 0.02, "snr {snr}: {p} vs {n0}");
        }
    }

    #[test]
    fn seeded_transmission_is_reproducible() {
        let z = vec![Complex64::new(1.0, 0.5); 64];
        let cfg = ChannelConfig::new(3.0, 128, 42);
        let a = transmit_awgn(&z, &cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        let b = transmit_awgn(&z, &cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn channel_uses_per_point() {
        assert_eq!(cpp(200, 2048), 0.048828125);
        assert_eq!(cpp(4096, 2048), 1.0);
        assert_eq!(cpp(50, 2048), 0.01220703125);
    }

    #[test]
    fn odd_dimensions_are_rejected() {
        assert!(ChannelConfig::new(0.0, 3, 0).validate().is_err());
        assert!(ChannelConfig {
            power: 0.0,
            ..ChannelConfig::new(0.0, 4, 0)
        }
        .validate()
        .is_err());
    }
}
