//! Staircase MCS rate function and its inverse.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_TABLE: &str = include_str!("../data/rate_table.toml");

/// Converts a power ratio in dB to linear scale.
pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(linear: f64) -> f64 {
    10.0 * linear.log10()
}

/// SNR of a zero-forced stream: `power * gain / noise`.
///
/// Every SNR in the crate goes through this function so that the powers
/// returned by [`RateTable::min_power_for_level`] land on the intended level.
#[inline]
pub fn snr(power_w: f64, effective_gain: f64, noise_power_w: f64) -> f64 {
    power_w * effective_gain / noise_power_w
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LevelSpec {
    threshold_db: f64,
    efficiency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TableSpec {
    prb_bandwidth_hz: f64,
    levels: Vec<LevelSpec>,
}

/// The `L` (threshold, efficiency) pairs of the rate function.
///
/// Levels are 1-based in the public API: level 0 means "not served", level
/// `l` in `1..=L` means the `l`-th MCS. Thresholds are converted to linear
/// scale once, at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    thresholds_db: Vec<f64>,
    thresholds: Vec<f64>,
    efficiencies: Vec<f64>,
    prb_bandwidth_hz: f64,
}

impl RateTable {
    pub fn new(
        thresholds_db: Vec<f64>,
        efficiencies: Vec<f64>,
        prb_bandwidth_hz: f64,
    ) -> Result<Self> {
        if thresholds_db.is_empty() {
            return Err(Error::InvalidRateTable(
                "at least one level is required".into(),
            ));
        }
        if thresholds_db.len() != efficiencies.len() {
            return Err(Error::InvalidRateTable(format!(
                "{} thresholds but {} efficiencies",
                thresholds_db.len(),
                efficiencies.len()
            )));
        }
        if !(prb_bandwidth_hz.is_finite() && prb_bandwidth_hz > 0.0) {
            return Err(Error::InvalidRateTable(
                "PRB bandwidth must be positive".into(),
            ));
        }
        if thresholds_db
            .iter()
            .chain(&efficiencies)
            .any(|v| !v.is_finite())
        {
            return Err(Error::InvalidRateTable("non-finite entry".into()));
        }
        if thresholds_db.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidRateTable(
                "thresholds must be strictly increasing".into(),
            ));
        }
        if efficiencies.windows(2).any(|w| w[0] >= w[1]) || efficiencies[0] <= 0.0 {
            return Err(Error::InvalidRateTable(
                "efficiencies must be positive and strictly increasing".into(),
            ));
        }
        let thresholds = thresholds_db.iter().map(|&t| db_to_linear(t)).collect();
        Ok(Self {
            thresholds_db,
            thresholds,
            efficiencies,
            prb_bandwidth_hz,
        })
    }

    /// Parses the TOML table format (see `data/rate_table.toml`).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: TableSpec = toml::from_str(text)?;
        let (t, e) = spec
            .levels
            .into_iter()
            .map(|l| (l.threshold_db, l.efficiency))
            .unzip();
        Self::new(t, e, spec.prb_bandwidth_hz)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        let spec = TableSpec {
            prb_bandwidth_hz: self.prb_bandwidth_hz,
            levels: self
                .thresholds_db
                .iter()
                .zip(&self.efficiencies)
                .map(|(&threshold_db, &efficiency)| LevelSpec {
                    threshold_db,
                    efficiency,
                })
                .collect(),
        };
        toml::to_string(&spec).expect("rate table serializes")
    }

    /// Number of MCS levels `L`.
    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn prb_bandwidth_hz(&self) -> f64 {
        self.prb_bandwidth_hz
    }

    pub fn thresholds_db(&self) -> &[f64] {
        &self.thresholds_db
    }

    pub fn efficiencies(&self) -> &[f64] {
        &self.efficiencies
    }

    /// Linear decoding threshold of `level` (1-based).
    pub fn threshold(&self, level: usize) -> f64 {
        self.thresholds[level - 1]
    }

    /// Rate in bit/s delivered at `level`; zero for level 0.
    pub fn rate_of_level(&self, level: usize) -> f64 {
        if level == 0 {
            0.0
        } else {
            self.prb_bandwidth_hz * self.efficiencies[level - 1]
        }
    }

    /// Highest level whose threshold does not exceed `snr_linear`; 0 below the first threshold.
    pub fn level_for_snr(&self, snr_linear: f64) -> usize {
        self.thresholds.partition_point(|&t| t <= snr_linear)
    }

    /// Rate in bit/s for a linear SNR. Lower-inclusive at every threshold.
    pub fn rate(&self, snr_linear: f64) -> f64 {
        self.rate_of_level(self.level_for_snr(snr_linear))
    }

    /// Smallest power for which [`snr`] reaches the threshold of `level`.
    pub fn min_power_for_level(
        &self,
        effective_gain: f64,
        level: usize,
        noise_power_w: f64,
    ) -> Result<f64> {
        if !(effective_gain > 0.0 && effective_gain.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "effective gain must be positive, got {effective_gain}"
            )));
        }
        if level == 0 || level > self.len() {
            return Err(Error::InvalidArgument(format!(
                "level {level} outside 1..={}",
                self.len()
            )));
        }
        Ok(self.min_power_unchecked(effective_gain, level, noise_power_w))
    }

    pub(crate) fn min_power_unchecked(
        &self,
        effective_gain: f64,
        level: usize,
        noise_power_w: f64,
    ) -> f64 {
        let target = self.threshold(level);
        let mut power = target * noise_power_w / effective_gain;
        // Correct the last-ulp rounding so the round trip never falls a level short.
        while snr(power, effective_gain, noise_power_w) < target {
            power = power.next_up();
        }
        power
    }
}

impl Default for RateTable {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_TABLE).expect("bundled rate table is valid")
    }
}
