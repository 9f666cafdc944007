//! Separate source-channel baseline: octree geometry coding over an
//! abstract coded-modulation link.

mod link;
mod octree;

pub use link::{
    capacity_and_dispersion, finite_blocklength_uses, link_transmit, normal_approximation_uses,
    CodeRate, LinkMode, LinkModel, LinkOutcome, Modulation, ThresholdTable,
};
pub use octree::{octree_decode, octree_encode, OctreeCode};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::metrics::{d1, MetricsConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub depth: u8,
    pub link: LinkModel,
    /// D1 recorded for a lost block.
    pub floor_db: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            depth: 6,
            link: LinkModel::default(),
            floor_db: 0.0,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=21).contains(&self.depth) {
            return Err(Error::invalid(format!(
                "octree depth must lie in 1..=21, got {}",
                self.depth
            )));
        }
        if !self.floor_db.is_finite() {
            return Err(Error::invalid("failure floor must be finite"));
        }
        self.link.validate()
    }
}

#[derive(Clone, Debug)]
pub struct BaselineOutput {
    /// `None` when the block was lost.
    pub reconstruction: Option<PointCloud>,
    pub bits: usize,
    pub uses: usize,
}

impl BaselineOutput {
    pub fn failed(&self) -> bool {
        self.reconstruction.is_none()
    }
}

/// Octree-codes a unit-cube cloud, sends the occupancy bytes and decodes
/// whatever arrives.
pub fn baseline_transmit(
    cloud: &PointCloud,
    depth: u8,
    snr_db: f64,
    link: &LinkModel,
) -> Result<BaselineOutput> {
    let code = octree_encode(cloud.points(), depth)?;
    let sent = link_transmit(&code.bytes, snr_db, link)?;
    let reconstruction = match sent.delivered {
        Some(bytes) => Some(PointCloud::from_points(octree_decode(&OctreeCode {
            depth,
            bytes,
        })?)?),
        None => None,
    };
    Ok(BaselineOutput {
        reconstruction,
        bits: code.bit_len(),
        uses: sent.uses,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineScore {
    pub d1_db: f64,
    pub failed: bool,
    pub bits: usize,
    pub uses: usize,
}

pub fn score_baseline(
    cloud: &PointCloud,
    snr_db: f64,
    cfg: &BaselineConfig,
    metrics: &MetricsConfig,
) -> Result<BaselineScore> {
    cfg.validate()?;
    let out = baseline_transmit(cloud, cfg.depth, snr_db, &cfg.link)?;
    let d1_db = match &out.reconstruction {
        Some(rec) => d1(cloud.points(), rec.points(), metrics)?.db,
        None => cfg.floor_db,
    };
    Ok(BaselineScore {
        d1_db,
        failed: out.failed(),
        bits: out.bits,
        uses: out.uses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub snr_db: f64,
    pub d1_db: f64,
    pub failures: usize,
    pub mean_bits: f64,
    pub mean_uses: f64,
    pub samples: usize,
}

/// Mean D1 and cost per SNR over `clouds`.
pub fn baseline_sweep(
    clouds: &[PointCloud],
    snrs: &[f64],
    cfg: &BaselineConfig,
    metrics: &MetricsConfig,
) -> Result<Vec<BaselineRow>> {
    if clouds.is_empty() || snrs.is_empty() {
        return Err(Error::invalid("baseline sweep needs clouds and SNR points"));
    }
    snrs.iter()
        .map(|&snr_db| {
            let scores = clouds
                .iter()
                .map(|c| score_baseline(c, snr_db, cfg, metrics))
                .collect::<Result<Vec<_>>>()?;
            let m = scores.len() as f64;
            Ok(BaselineRow {
                snr_db,
                d1_db: scores.iter().map(|s| s.d1_db).sum::<f64>() / m,
                failures: scores.iter().filter(|s| s.failed).count(),
                mean_bits: scores.iter().map(|s| s.bits as f64).sum::<f64>() / m,
                mean_uses: scores.iter().map(|s| s.uses as f64).sum::<f64>() / m,
                samples: scores.len(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{generate_dataset, DatasetSpec, ShapeFamily};

    fn clouds(count: usize) -> Vec<PointCloud> {
        generate_dataset(&DatasetSpec {
            family: ShapeFamily::Composite,
            count,
            points: 256,
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn failure_records_the_floor() {
        let cfg = BaselineConfig {
            floor_db: -7.0,
            ..BaselineConfig::default()
        };
        let cloud = &clouds(1)[0];
        let s = score_baseline(cloud, 3.0, &cfg, &MetricsConfig::default()).unwrap();
        assert!(s.failed);
        assert_eq!(s.d1_db, -7.0);
        assert_eq!(s.uses, cfg.link.uses(s.bits));
        let out = baseline_transmit(cloud, cfg.depth, 3.0, &cfg.link).unwrap();
        assert!(out.failed() && out.reconstruction.is_none());
    }

    #[test]
    fn sweep_is_a_step_function() {
        let cfg = BaselineConfig::default();
        let snrs: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let rows = baseline_sweep(&clouds(4), &snrs, &cfg, &MetricsConfig::default()).unwrap();
        let threshold = cfg.link.threshold_db();
        for r in &rows {
            if r.snr_db < threshold {
                assert_eq!((r.failures, r.d1_db), (4, cfg.floor_db));
            } else {
                assert_eq!(r.failures, 0);
                assert_eq!(r.d1_db, rows[rows.len() - 1].d1_db);
                assert!(r.d1_db > cfg.floor_db + 10.0);
            }
        }
        assert!(rows
            .iter()
            .all(|r| r.mean_bits == rows[0].mean_bits && r.mean_uses == rows[0].mean_uses));
    }

    #[test]
    fn finer_octrees_do_not_lower_d1() {
        let metrics = MetricsConfig::default();
        for c in &clouds(4) {
            let coarse = score_baseline(
                c,
                20.0,
                &BaselineConfig {
                    depth: 5,
                    ..BaselineConfig::default()
                },
                &metrics,
            )
            .unwrap();
            let fine = score_baseline(
                c,
                20.0,
                &BaselineConfig {
                    depth: 6,
                    ..BaselineConfig::default()
                },
                &metrics,
            )
            .unwrap();
            assert!(
                fine.d1_db >= coarse.d1_db,
                "{} vs {}",
                fine.d1_db,
                coarse.d1_db
            );
            assert!(fine.bits > coarse.bits);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(BaselineConfig {
            depth: 0,
            ..BaselineConfig::default()
        }
        .validate()
        .is_err());
        assert!(BaselineConfig {
            floor_db: f64::NAN,
            ..BaselineConfig::default()
        }
        .validate()
        .is_err());
        assert!(baseline_sweep(
            &[],
            &[1.0],
            &BaselineConfig::default(),
            &MetricsConfig::default()
        )
        .is_err());
    }
}
