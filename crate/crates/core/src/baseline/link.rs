use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "bpsk")]
    Bpsk,
    #[serde(rename = "qpsk")]
    Qpsk,
    #[serde(rename = "16qam")]
    Qam16,
}

impl Modulation {
    /// Coded bits carried by one complex channel use.
    pub fn bits_per_symbol(self) -> u32 {
        match self {
            Modulation::Bpsk => 1,
            Modulation::Qpsk => 2,
            Modulation::Qam16 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodeRate {
    #[serde(rename = "1/2")]
    Half,
    #[serde(rename = "3/4")]
    ThreeQuarters,
}

impl CodeRate {
    pub fn value(self) -> f64 {
        match self {
            CodeRate::Half => 0.5,
            CodeRate::ThreeQuarters => 0.75,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkMode {
    /// Delivered iff the SNR reaches the table threshold.
    #[default]
    Threshold,
    /// Delivered iff the normal approximation fits the bits into the
    /// coded block's channel uses.
    FiniteBlocklength,
}

/// Decoding thresholds in dB (Es/N0 per complex symbol) at block error
/// rate 1e-3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdTable {
    pub bpsk_half: f64,
    pub bpsk_three_quarters: f64,
    pub qpsk_half: f64,
    pub qpsk_three_quarters: f64,
    pub qam16_half: f64,
    pub qam16_three_quarters: f64,
}

impl Default for ThresholdTable {
    fn default() -> Self {
        ThresholdTable {
            bpsk_half: -1.0,
            bpsk_three_quarters: 1.5,
            qpsk_half: 2.0,
            qpsk_three_quarters: 4.5,
            qam16_half: 7.0,
            qam16_three_quarters: 9.5,
        }
    }
}

impl ThresholdTable {
    pub fn get(&self, modulation: Modulation, rate: CodeRate) -> f64 {
        match (modulation, rate) {
            (Modulation::Bpsk, CodeRate::Half) => self.bpsk_half,
            (Modulation::Bpsk, CodeRate::ThreeQuarters) => self.bpsk_three_quarters,
            (Modulation::Qpsk, CodeRate::Half) => self.qpsk_half,
            (Modulation::Qpsk, CodeRate::ThreeQuarters) => self.qpsk_three_quarters,
            (Modulation::Qam16, CodeRate::Half) => self.qam16_half,
            (Modulation::Qam16, CodeRate::ThreeQuarters) => self.qam16_three_quarters,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub modulation: Modulation,
    pub rate: CodeRate,
    pub mode: LinkMode,
    /// Block error target.
    pub epsilon: f64,
    pub thresholds: ThresholdTable,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            modulation: Modulation::Qam16,
            rate: CodeRate::ThreeQuarters,
            mode: LinkMode::Threshold,
            epsilon: 1e-3,
            thresholds: ThresholdTable::default(),
        }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::invalid(format!(
                "block error target must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        let t = &self.thresholds;
        let all = [
            t.bpsk_half,
            t.bpsk_three_quarters,
            t.qpsk_half,
            t.qpsk_three_quarters,
            t.qam16_half,
            t.qam16_three_quarters,
        ];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("thresholds must be finite"));
        }
        Ok(())
    }

    pub fn threshold_db(&self) -> f64 {
        self.thresholds.get(self.modulation, self.rate)
    }

    /// Complex channel uses of the coded, modulated block.
    pub fn uses(&self, bits: usize) -> usize {
        let per_use = self.rate.value() * self.modulation.bits_per_symbol() as f64;
        (bits as f64 / per_use).ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinkOutcome {
    /// The payload when delivered, `None` on block loss.
    pub delivered: Option<Vec<u8>>,
    pub uses: usize,
}

/// Sends `payload` (8 bits per byte) as one coded block.
pub fn link_transmit(payload: &[u8], snr_db: f64, model: &LinkModel) -> Result<LinkOutcome> {
    model.validate()?;
    if payload.is_empty() {
        return Err(Error::invalid("cannot transmit an empty bit sequence"));
    }
    let bits = payload.len() * 8;
    let uses = model.uses(bits);
    let ok = match model.mode {
        LinkMode::Threshold => snr_db >= model.threshold_db(),
        LinkMode::FiniteBlocklength => {
            finite_blocklength_uses(bits, snr_db, model.epsilon)? <= uses
        }
    };
    Ok(LinkOutcome {
        delivered: ok.then(|| payload.to_vec()),
        uses,
    })
}

/// Capacity and dispersion (bits, bits^2) of the complex AWGN channel.
pub fn capacity_and_dispersion(snr_db: f64) -> (f64, f64) {
    let g = 10f64.powf(snr_db / 10.0);
    let log2e = std::f64::consts::LOG2_E;
    (
        (1.0 + g).log2(),
        g * (g + 2.0) / ((g + 1.0) * (g + 1.0)) * log2e * log2e,
    )
}

/// Smallest `n` with `k <= n C - sqrt(n V) Q^-1(eps) [+ log2(n) / 2]`.
pub fn normal_approximation_uses(
    bits: usize,
    snr_db: f64,
    epsilon: f64,
    log_term: bool,
) -> Result<usize> {
    if bits == 0 {
        return Err(Error::invalid("bit count must be >= 1"));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) || snr_db.is_nan() {
        return Err(Error::invalid(
            "block error target must lie in (0, 1) and the SNR must be a number",
        ));
    }
    let (c, v) = capacity_and_dispersion(snr_db);
    if c <= 0.0 {
        return Err(Error::invalid(format!("no capacity at {snr_db} dB")));
    }
    let q = Normal::standard().inverse_cdf(1.0 - epsilon);
    let k = bits as f64;
    let fits = |n: usize| {
        let n = n as f64;
        let extra = if log_term { 0.5 * n.log2() } else { 0.0 };
        n * c - (n * v).sqrt() * q + extra >= k
    };
    // the rate bound first falls then rises in n, and the falling part
    // starts below k, so `fits` flips once
    let mut hi = 1usize;
    while !fits(hi) {
        hi = hi
            .checked_mul(2)
            .ok_or_else(|| Error::invalid("channel-use search overflowed"))?;
    }
    let mut lo = hi / 2;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if fits(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

pub fn finite_blocklength_uses(bits: usize, snr_db: f64, epsilon: f64) -> Result<usize> {
    normal_approximation_uses(bits, snr_db, epsilon, true)
}
