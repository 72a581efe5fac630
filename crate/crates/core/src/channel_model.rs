//! User geometry, large-scale fading and per-PRB correlated Rician channels.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rate_function::{db_to_linear, RateTable};
use crate::rng::{stream, StreamDomain};
use crate::scheduler::SliceConfig;

const DEFAULT_SCENARIOS: &str = include_str!("../data/scenarios.toml");
const SPEED_OF_LIGHT: f64 = 299_792_458.0;
const THERMAL_NOISE_DBM_PER_HZ: f64 = -174.0;

/// Seed of the user population behind [`calibrate_noise_power`].
pub const CALIBRATION_SEED: u64 = 0x5eed_ca11;
/// Upper bound on position redraws per user slot.
pub const MAX_REDRAWS: usize = 10_000;

#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Scenario {
    #[default]
    UMa,
    RMa,
    UMi,
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::UMa => "UMa",
            Scenario::RMa => "RMa",
            Scenario::UMi => "UMi",
        })
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "UMa" | "uma" => Ok(Scenario::UMa),
            "RMa" | "rma" => Ok(Scenario::RMa),
            "UMi" | "umi" => Ok(Scenario::UMi),
            other => Err(Error::InvalidScenario(format!(
                "unknown scenario `{other}`"
            ))),
        }
    }
}

/// Single-slope pathloss and shadowing for one LOS condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathlossCoeffs {
    pub theta3: f64,
    pub theta4: f64,
    pub theta5: f64,
    pub shadow_std_db: f64,
}

/// Deployment constants of one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioParams {
    #[serde(skip)]
    pub scenario_id: Scenario,
    pub carrier_freq_hz: f64,
    pub cell_radius_m: f64,
    pub total_power_w_per_prb: f64,
    pub los_dmin_m: f64,
    pub los_theta1_m: f64,
    pub los_theta2_m: f64,
    pub los: PathlossCoeffs,
    pub nlos: PathlossCoeffs,
    pub rician_mean_db: f64,
    pub rician_std_db: f64,
    pub bs_height_m: f64,
    pub user_height_m: f64,
    pub noise_figure_db: f64,
}

impl ScenarioParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.carrier_freq_hz,
            self.cell_radius_m,
            self.total_power_w_per_prb,
            self.los_dmin_m,
            self.los_theta1_m,
            self.los_theta2_m,
            self.rician_mean_db,
            self.rician_std_db,
            self.bs_height_m,
            self.user_height_m,
            self.noise_figure_db,
            self.los.theta3,
            self.los.theta4,
            self.los.theta5,
            self.los.shadow_std_db,
            self.nlos.theta3,
            self.nlos.theta4,
            self.nlos.theta5,
            self.nlos.shadow_std_db,
        ];
        let bad = |what: &str| {
            Err(Error::InvalidScenario(format!(
                "{}: {what}",
                self.scenario_id
            )))
        };
        if finite.iter().any(|v| !v.is_finite()) {
            return bad("non-finite parameter");
        }
        if self.carrier_freq_hz <= 0.0 {
            return bad("carrier frequency must be positive");
        }
        if self.cell_radius_m <= 0.0 {
            return bad("cell radius must be positive");
        }
        if self.total_power_w_per_prb <= 0.0 {
            return bad("power per PRB must be positive");
        }
        if self.los_theta2_m <= 0.0 || self.los_theta1_m < 0.0 || self.los_dmin_m < 0.0 {
            return bad("LOS probability constants out of range");
        }
        if self.los.shadow_std_db < 0.0 || self.nlos.shadow_std_db < 0.0 || self.rician_std_db < 0.0
        {
            return bad("standard deviations must be non-negative");
        }
        if self.bs_height_m <= self.user_height_m || self.user_height_m < 0.0 {
            return bad("base station must be above the users");
        }
        Ok(())
    }

    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq_hz
    }

    /// Thermal noise over one PRB plus the receiver noise figure, in watts.
    pub fn noise_power_w(&self, prb_bandwidth_hz: f64) -> f64 {
        let dbm = THERMAL_NOISE_DBM_PER_HZ + 10.0 * prb_bandwidth_hz.log10() + self.noise_figure_db;
        db_to_linear(dbm - 30.0)
    }

    pub fn coeffs(&self, is_los: bool) -> &PathlossCoeffs {
        if is_los {
            &self.los
        } else {
            &self.nlos
        }
    }
}

/// The scenario parameter file: one table per scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioCatalog {
    entries: BTreeMap<Scenario, ScenarioParams>,
}

impl ScenarioCatalog {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, ScenarioParams> = toml::from_str(text)?;
        let mut entries = BTreeMap::new();
        for (key, mut params) in raw {
            let id: Scenario = key.parse()?;
            params.scenario_id = id;
            params.validate()?;
            entries.insert(id, params);
        }
        Ok(Self { entries })
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, scenario: Scenario) -> Result<&ScenarioParams> {
        self.entries.get(&scenario).ok_or_else(|| {
            Error::InvalidScenario(format!("scenario {scenario} not in parameter file"))
        })
    }

    pub fn scenarios(&self) -> impl Iterator<Item = Scenario> + '_ {
        self.entries.keys().copied()
    }
}

impl Default for ScenarioCatalog {
    fn default() -> Self {
        Self::from_toml_str(DEFAULT_SCENARIOS).expect("bundled scenario file is valid")
    }
}

/// Probability that a user at horizontal distance `d2d_m` sees a LOS path.
pub fn los_probability(d2d_m: f64, params: &ScenarioParams) -> f64 {
    if d2d_m <= params.los_dmin_m {
        return 1.0;
    }
    let ratio = params.los_theta1_m / d2d_m;
    (ratio + (1.0 - ratio) * (-d2d_m / params.los_theta2_m).exp()).clamp(0.0, 1.0)
}

/// Mean pathloss in dB, with `d3d_m` in meters and the carrier in Hz (evaluated in GHz).
pub fn pathloss_mean_db(d3d_m: f64, carrier_freq_hz: f64, coeffs: &PathlossCoeffs) -> Result<f64> {
    if !(d3d_m > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "3D distance must be positive, got {d3d_m}"
        )));
    }
    if !(carrier_freq_hz > 0.0) {
        return Err(Error::InvalidArgument(
            "carrier frequency must be positive".into(),
        ));
    }
    Ok(coeffs.theta3
        + coeffs.theta4 * d3d_m.log10()
        + coeffs.theta5 * (carrier_freq_hz / 1e9).log10())
}

/// Uniform planar array with half-wavelength spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct AntennaArray {
    num_antennas: usize,
    side: usize,
    element_positions: Vec<[f64; 3]>,
    correlation_coeff: f64,
}

impl AntennaArray {
    /// Builds a `side x side` array in the vertical plane, centred at height `center_height_m`.
    pub fn new(
        num_antennas: usize,
        correlation_coeff: f64,
        wavelength_m: f64,
        center_height_m: f64,
    ) -> Result<Self> {
        let side = (num_antennas as f64).sqrt().round() as usize;
        if num_antennas == 0 || side * side != num_antennas {
            return Err(Error::InvalidArgument(format!(
                "antenna count {num_antennas} is not a perfect square"
            )));
        }
        if !(0.0..=1.0).contains(&correlation_coeff) {
            return Err(Error::InvalidArgument(format!(
                "correlation coefficient {correlation_coeff} outside [0, 1]"
            )));
        }
        let spacing = wavelength_m / 2.0;
        let offset = (side as f64 - 1.0) / 2.0;
        let element_positions = (0..num_antennas)
            .map(|m| {
                let (v, h) = (m / side, m % side);
                [
                    0.0,
                    (h as f64 - offset) * spacing,
                    center_height_m + (v as f64 - offset) * spacing,
                ]
            })
            .collect();
        Ok(Self {
            num_antennas,
            side,
            element_positions,
            correlation_coeff,
        })
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn correlation_coeff(&self) -> f64 {
        self.correlation_coeff
    }

    pub fn element_positions(&self) -> &[[f64; 3]] {
        &self.element_positions
    }

    /// (vertical, horizontal) grid index of element `m`.
    pub fn grid_index(&self, m: usize) -> (usize, usize) {
        (m / self.side, m % self.side)
    }
}

/// Exponential correlation: `R[i][j] = psi^(|v(i)-v(j)| + |h(i)-h(j)|)`.
///
/// The entries are real, so the matrix is returned as real symmetric.
pub fn correlation_matrix(array: &AntennaArray) -> DMatrix<f64> {
    let psi = array.correlation_coeff();
    DMatrix::from_fn(array.num_antennas(), array.num_antennas(), |i, j| {
        let (vi, hi) = array.grid_index(i);
        let (vj, hj) = array.grid_index(j);
        let dist = vi.abs_diff(vj) + hi.abs_diff(hj);
        psi.powi(dist as i32)
    })
}

/// Symmetric square root of a positive semi-definite matrix.
pub fn psd_sqrt(matrix: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(matrix.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserGeometry {
    pub position_m: [f64; 3],
    pub d2d_m: f64,
    pub d3d_m: f64,
    pub is_los: bool,
    pub slice_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LargeScaleFading {
    pub mean_pathloss_db: f64,
    pub shadowing_db: f64,
    pub rho_linear: f64,
    pub rician_k_linear: f64,
}

impl LargeScaleFading {
    pub fn rho_db(&self) -> f64 {
        -(self.mean_pathloss_db + self.shadowing_db)
    }
}

/// Everything that stays fixed across realizations: scenario, array, rate
/// table and the resulting link budget.
#[derive(Clone, Debug)]
pub struct SystemModel {
    pub params: ScenarioParams,
    pub array: AntennaArray,
    pub table: RateTable,
    pub noise_power_w: f64,
    corr_sqrt: Option<DMatrix<f64>>,
}

impl SystemModel {
    pub fn new(
        params: ScenarioParams,
        num_antennas: usize,
        correlation_coeff: f64,
        table: RateTable,
    ) -> Result<Self> {
        params.validate()?;
        let array = AntennaArray::new(
            num_antennas,
            correlation_coeff,
            params.wavelength_m(),
            params.bs_height_m,
        )?;
        let corr_sqrt = (correlation_coeff > 0.0).then(|| psd_sqrt(&correlation_matrix(&array)));
        let noise_power_w = params.noise_power_w(table.prb_bandwidth_hz());
        Ok(Self {
            params,
            array,
            table,
            noise_power_w,
            corr_sqrt,
        })
    }

    /// Overrides the link-budget noise power.
    pub fn with_noise_power(mut self, noise_power_w: f64) -> Result<Self> {
        if !(noise_power_w > 0.0 && noise_power_w.is_finite()) {
            return Err(Error::InvalidArgument(
                "noise power must be positive".into(),
            ));
        }
        self.noise_power_w = noise_power_w;
        Ok(self)
    }

    pub fn num_antennas(&self) -> usize {
        self.array.num_antennas()
    }

    pub fn power_budget_w(&self) -> f64 {
        self.params.total_power_w_per_prb
    }

    /// Single-user SNR of a user with large-scale gain `rho`, using the mean
    /// channel energy `M * rho` in place of one fading draw.
    pub fn mean_single_user_snr(&self, rho_linear: f64) -> f64 {
        self.power_budget_w() * self.num_antennas() as f64 * rho_linear / self.noise_power_w
    }

    pub fn correlation_sqrt(&self) -> Option<&DMatrix<f64>> {
        self.corr_sqrt.as_ref()
    }
}

/// Per-frame channel: large-scale state per user plus one `U x M` matrix per PRB.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelRealization {
    pub users: Vec<UserGeometry>,
    pub large_scale: Vec<LargeScaleFading>,
    pub prbs: Vec<DMatrix<Complex64>>,
    pub num_antennas: usize,
    pub rng_seed: u64,
}

impl ChannelRealization {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_prbs(&self) -> usize {
        self.prbs.len()
    }

    /// Channel matrix of PRB `n` (0-based).
    pub fn channel(&self, n: usize) -> &DMatrix<Complex64> {
        &self.prbs[n]
    }

    pub fn rho_db(&self, users: &[usize]) -> Vec<f64> {
        users
            .iter()
            .map(|&u| self.large_scale[u].rho_db())
            .collect()
    }

    /// Writes the realization as JSON lines: a header, one line per user, one per PRB.
    pub fn export_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        let header = ExportHeader {
            seed: self.rng_seed,
            num_antennas: self.num_antennas,
            num_users: self.num_users(),
            num_prbs: self.num_prbs(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for (u, (geometry, fading)) in self.users.iter().zip(&self.large_scale).enumerate() {
            let line = ExportUser {
                user: u,
                geometry: geometry.clone(),
                fading: fading.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        for (n, g) in self.prbs.iter().enumerate() {
            let rows = |f: fn(&Complex64) -> f64| -> Vec<Vec<f64>> {
                (0..g.nrows())
                    .map(|u| g.row(u).iter().map(f).collect())
                    .collect()
            };
            let line = ExportPrb {
                prb: n,
                re: rows(|z| z.re),
                im: rows(|z| z.im),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads the format written by [`ChannelRealization::export_jsonl`].
    pub fn import_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header: ExportHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::MalformedRecord("empty realization file".into())),
        };
        let mut users = Vec::with_capacity(header.num_users);
        let mut large_scale = Vec::with_capacity(header.num_users);
        for u in 0..header.num_users {
            let line = lines
                .next()
                .ok_or_else(|| Error::MalformedRecord(format!("missing user line {u}")))??;
            let rec: ExportUser = serde_json::from_str(&line)?;
            if rec.user != u {
                return Err(Error::MalformedRecord(format!(
                    "expected user {u}, got {}",
                    rec.user
                )));
            }
            users.push(rec.geometry);
            large_scale.push(rec.fading);
        }
        let mut prbs = Vec::with_capacity(header.num_prbs.min(1 << 16));
        for n in 0..header.num_prbs {
            let line = lines
                .next()
                .ok_or_else(|| Error::MalformedRecord(format!("missing PRB line {n}")))??;
            let rec: ExportPrb = serde_json::from_str(&line)?;
            let shape_ok = rec.prb == n
                && rec.re.len() == header.num_users
                && rec.im.len() == header.num_users
                && rec
                    .re
                    .iter()
                    .chain(&rec.im)
                    .all(|row| row.len() == header.num_antennas);
            if !shape_ok {
                return Err(Error::MalformedRecord(format!(
                    "PRB line {n} has the wrong shape"
                )));
            }
            prbs.push(DMatrix::from_fn(
                header.num_users,
                header.num_antennas,
                |u, m| Complex64::new(rec.re[u][m], rec.im[u][m]),
            ));
        }
        Ok(Self {
            users,
            large_scale,
            prbs,
            num_antennas: header.num_antennas,
            rng_seed: header.seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ExportHeader {
    seed: u64,
    num_antennas: usize,
    num_users: usize,
    num_prbs: usize,
}

#[derive(Serialize, Deserialize)]
struct ExportUser {
    user: usize,
    #[serde(flatten)]
    geometry: UserGeometry,
    #[serde(flatten)]
    fading: LargeScaleFading,
}

#[derive(Serialize, Deserialize)]
struct ExportPrb {
    prb: usize,
    re: Vec<Vec<f64>>,
    im: Vec<Vec<f64>>,
}

struct LargeScaleDraw {
    position_m: [f64; 3],
    d2d_m: f64,
    d3d_m: f64,
    is_los: bool,
    mean_pathloss_db: f64,
    shadowing_db: f64,
    rician_db: f64,
}

fn draw_large_scale<R: Rng>(
    params: &ScenarioParams,
    rician: &Normal<f64>,
    rng: &mut R,
) -> Result<LargeScaleDraw> {
    let height_gap = params.bs_height_m - params.user_height_m;
    let radius = params.cell_radius_m * rng.gen::<f64>().sqrt();
    let angle = rng.gen::<f64>() * std::f64::consts::TAU;
    let d3d_m = (radius * radius + height_gap * height_gap).sqrt();
    let is_los = rng.gen::<f64>() < los_probability(radius, params);
    let coeffs = params.coeffs(is_los);
    let mean_pathloss_db = pathloss_mean_db(d3d_m, params.carrier_freq_hz, coeffs)?;
    let shadowing_db = coeffs.shadow_std_db * rng.sample::<f64, _>(StandardNormal);
    let rician_db = rician.sample(rng);
    Ok(LargeScaleDraw {
        position_m: [
            radius * angle.cos(),
            radius * angle.sin(),
            params.user_height_m,
        ],
        d2d_m: radius,
        d3d_m,
        is_los,
        mean_pathloss_db,
        shadowing_db,
        rician_db,
    })
}

/// Noise power that puts the `quantile` of the mean single-user SNR of freshly
/// drawn users exactly on the threshold of `level`.
///
/// Users are drawn from a fixed calibration stream, so the result depends only
/// on the scenario, the array size and the table.
pub fn calibrate_noise_power(
    params: &ScenarioParams,
    num_antennas: usize,
    table: &RateTable,
    quantile: f64,
    level: usize,
    samples: usize,
) -> Result<f64> {
    if !(quantile > 0.0 && quantile < 1.0) || samples == 0 {
        return Err(Error::InvalidArgument(
            "calibration needs a quantile in (0, 1) and samples".into(),
        ));
    }
    if level == 0 || level > table.len() {
        return Err(Error::InvalidArgument(format!(
            "level {level} outside the rate table"
        )));
    }
    params.validate()?;
    let rician = Normal::new(params.rician_mean_db, params.rician_std_db)
        .map_err(|e| Error::InvalidScenario(e.to_string()))?;
    let mut rng = stream(CALIBRATION_SEED, StreamDomain::Geometry, 0, 0);
    let mut rho_db = (0..samples)
        .map(|_| {
            draw_large_scale(params, &rician, &mut rng)
                .map(|d| -(d.mean_pathloss_db + d.shadowing_db))
        })
        .collect::<Result<Vec<f64>>>()?;
    rho_db.sort_by(f64::total_cmp);
    let idx = ((quantile * samples as f64).floor() as usize).min(samples - 1);
    let rho = db_to_linear(rho_db[idx]);
    Ok(params.total_power_w_per_prb * num_antennas as f64 * rho / table.threshold(level))
}

struct UserDraw {
    geometry: UserGeometry,
    fading: LargeScaleFading,
    los_phase: Vec<Complex64>,
}

fn standard_complex_normal<R: Rng>(rng: &mut R) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn draw_user(system: &SystemModel, slot: usize, slice_id: usize, seed: u64) -> Result<UserDraw> {
    let params = &system.params;
    let min_snr = system.table.threshold(1);
    let mut rng = stream(seed, StreamDomain::Geometry, slot as u64, 0);
    let rician = Normal::new(params.rician_mean_db, params.rician_std_db)
        .map_err(|e| Error::InvalidScenario(e.to_string()))?;
    for _ in 0..MAX_REDRAWS {
        let LargeScaleDraw {
            position_m,
            d2d_m,
            d3d_m,
            is_los,
            mean_pathloss_db,
            shadowing_db,
            rician_db,
        } = draw_large_scale(params, &rician, &mut rng)?;
        let rho_linear = db_to_linear(-(mean_pathloss_db + shadowing_db));
        if system.mean_single_user_snr(rho_linear) < min_snr {
            continue;
        }
        let rician_k_linear = if is_los { db_to_linear(rician_db) } else { 0.0 };
        let wavelength = params.wavelength_m();
        let los_phase = system
            .array
            .element_positions()
            .iter()
            .map(|a| {
                let dist = ((position_m[0] - a[0]).powi(2)
                    + (position_m[1] - a[1]).powi(2)
                    + (position_m[2] - a[2]).powi(2))
                .sqrt();
                Complex64::from_polar(1.0, std::f64::consts::TAU * dist / wavelength)
            })
            .collect();
        return Ok(UserDraw {
            geometry: UserGeometry {
                position_m,
                d2d_m,
                d3d_m,
                is_los,
                slice_id,
            },
            fading: LargeScaleFading {
                mean_pathloss_db,
                shadowing_db,
                rho_linear,
                rician_k_linear,
            },
            los_phase,
        });
    }
    Err(Error::InfeasibleScenario {
        slot,
        attempts: MAX_REDRAWS,
    })
}

/// One user's channel row on one PRB.
fn channel_row(
    system: &SystemModel,
    user: &UserDraw,
    prb: usize,
    slot: usize,
    seed: u64,
) -> Vec<Complex64> {
    let m = system.num_antennas();
    let mut rng = stream(seed, StreamDomain::SmallScale, prb as u64, slot as u64);
    let gaussian: Vec<Complex64> = (0..m).map(|_| standard_complex_normal(&mut rng)).collect();
    let scattered = match system.correlation_sqrt() {
        Some(sqrt) => (0..m)
            .map(|j| (0..m).map(|i| gaussian[i] * sqrt[(i, j)]).sum())
            .collect(),
        None => gaussian,
    };
    let rho = user.fading.rho_linear;
    let k = user.fading.rician_k_linear;
    let w_scatter = (rho / (1.0 + k)).sqrt();
    let w_los = (k * rho / (1.0 + k)).sqrt();
    scattered
        .iter()
        .zip(&user.los_phase)
        .map(|(s, l)| s * w_scatter + l * w_los)
        .collect()
}

/// Draws users for every slice and their channels on `num_prbs` PRBs.
///
/// User ids follow the slice order of `slices`; the realization is a pure
/// function of `(system, slices, num_prbs, rng_seed)`.
pub fn sample_channel_realization(
    system: &SystemModel,
    slices: &[SliceConfig],
    num_prbs: usize,
    rng_seed: u64,
) -> Result<ChannelRealization> {
    let num_users: usize = slices.iter().map(|s| s.users.len()).sum();
    if num_users == 0 {
        return Err(Error::InvalidArgument(
            "at least one user is required".into(),
        ));
    }
    if num_prbs == 0 {
        return Err(Error::InvalidArgument(
            "at least one PRB is required".into(),
        ));
    }
    let mut slice_of = vec![usize::MAX; num_users];
    for s in slices {
        for &u in &s.users {
            if u >= num_users || slice_of[u] != usize::MAX {
                return Err(Error::InvalidArgument(format!(
                    "user id {u} invalid or duplicated"
                )));
            }
            slice_of[u] = s.slice_id;
        }
    }
    let draws = (0..num_users)
        .map(|u| draw_user(system, u, slice_of[u], rng_seed))
        .collect::<Result<Vec<_>>>()?;
    let m = system.num_antennas();
    let prbs = (0..num_prbs)
        .map(|n| {
            let mut g = DMatrix::zeros(num_users, m);
            for (u, draw) in draws.iter().enumerate() {
                for (j, v) in channel_row(system, draw, n, u, rng_seed)
                    .into_iter()
                    .enumerate()
                {
                    g[(u, j)] = v;
                }
            }
            g
        })
        .collect();
    let (users, large_scale) = draws.into_iter().map(|d| (d.geometry, d.fading)).unzip();
    Ok(ChannelRealization {
        users,
        large_scale,
        prbs,
        num_antennas: m,
        rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn uma() -> ScenarioParams {
        ScenarioCatalog::default()
            .get(Scenario::UMa)
            .unwrap()
            .clone()
    }

    fn slices(counts: &[usize]) -> Vec<SliceConfig> {
        crate::scheduler::equal_share_slices(counts).unwrap()
    }

    #[test]
    fn los_probability_branches() {
        let p = uma();
        assert_eq!(los_probability(p.los_dmin_m / 2.0, &p), 1.0);
        let mut q = p.clone();
        q.los_dmin_m = 10.0;
        assert_relative_eq!(los_probability(q.los_theta1_m, &q), 1.0, epsilon = 1e-15);
        // 0.18 + 0.82 * exp(-100/63)
        let oracle = 0.18 + 0.82 * (-100.0f64 / 63.0).exp();
        assert_relative_eq!(los_probability(100.0, &p), oracle, epsilon = 1e-15);
        assert_relative_eq!(oracle, 0.34758, epsilon = 1e-4);
    }

    #[test]
    fn pathloss_examples() {
        let c = PathlossCoeffs {
            theta3: 28.0,
            theta4: 22.0,
            theta5: 20.0,
            shadow_std_db: 0.0,
        };
        let mu = pathloss_mean_db(100.0, 2.5e9, &c).unwrap();
        assert_relative_eq!(mu, 79.958_800_173_440_75, epsilon = 1e-9);
        let flat = PathlossCoeffs {
            theta4: 0.0,
            theta5: 0.0,
            ..c
        };
        assert_eq!(pathloss_mean_db(3.0, 2.5e9, &flat).unwrap(), 28.0);
        assert_eq!(pathloss_mean_db(3000.0, 7e9, &flat).unwrap(), 28.0);
        let d1 = pathloss_mean_db(37.0, 2.5e9, &c).unwrap();
        let d2 = pathloss_mean_db(74.0, 2.5e9, &c).unwrap();
        assert_relative_eq!(d2 - d1, 22.0 * 2f64.log10(), epsilon = 1e-12);
        assert!(pathloss_mean_db(0.0, 2.5e9, &c).is_err());
    }

    #[test]
    fn correlation_matrix_examples() {
        let wl = 0.12;
        let a = AntennaArray::new(9, 0.0, wl, 25.0).unwrap();
        assert_eq!(correlation_matrix(&a), DMatrix::identity(9, 9));
        let a = AntennaArray::new(9, 1.0, wl, 25.0).unwrap();
        assert_eq!(correlation_matrix(&a), DMatrix::from_element(9, 9, 1.0));
        let a = AntennaArray::new(4, 0.5, wl, 25.0).unwrap();
        let r = correlation_matrix(&a);
        // 2x2 grid: element 0 at (0,0), 1 at (0,1), 2 at (1,0), 3 at (1,1)
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.5, 0.5, 0.25, 0.5, 1.0, 0.25, 0.5, 0.5, 0.25, 1.0, 0.5, 0.25, 0.5, 0.5, 1.0,
            ],
        );
        assert_eq!(r, expected);
    }

    #[test]
    fn correlation_matrix_is_psd_with_unit_diagonal() {
        for &psi in &[0.0, 0.01, 0.3, 0.7, 1.0] {
            let a = AntennaArray::new(16, psi, 0.12, 25.0).unwrap();
            let r = correlation_matrix(&a);
            assert_eq!(r, r.transpose());
            assert!(r.diagonal().iter().all(|&d| d == 1.0));
            let eig = SymmetricEigen::new(r.clone());
            assert!(eig.eigenvalues.iter().all(|&l| l > -1e-12));
            let s = psd_sqrt(&r);
            assert!((&s * &s - &r).abs().max() < 1e-10);
        }
    }

    #[test]
    fn array_geometry() {
        let wl = 0.12;
        let a = AntennaArray::new(16, 0.0, wl, 25.0).unwrap();
        let p = a.element_positions();
        assert_relative_eq!(p[1][1] - p[0][1], wl / 2.0, epsilon = 1e-12);
        assert_relative_eq!(p[4][2] - p[0][2], wl / 2.0, epsilon = 1e-12);
        assert!(AntennaArray::new(15, 0.0, wl, 25.0).is_err());
        assert!(AntennaArray::new(16, 1.5, wl, 25.0).is_err());
    }

    #[test]
    fn scenario_file_validation() {
        let cat = ScenarioCatalog::default();
        assert_eq!(cat.scenarios().count(), 3);
        for s in cat.scenarios() {
            cat.get(s).unwrap().validate().unwrap();
        }
        let mut bad = uma();
        bad.cell_radius_m = 0.0;
        assert!(bad.validate().is_err());
        assert!(ScenarioCatalog::from_toml_str("[XYZ]\ncarrier_freq_hz = 1.0").is_err());
    }

    #[test]
    fn noise_power_is_thermal_plus_figure() {
        let p = uma();
        let n = p.noise_power_w(180e3);
        let dbm = 10.0 * (n * 1e3).log10();
        assert_relative_eq!(dbm, -174.0 + 10.0 * 180e3f64.log10() + 9.0, epsilon = 1e-9);
    }

    #[test]
    fn realization_is_deterministic_and_round_trips() {
        let system = SystemModel::new(uma(), 16, 0.01, RateTable::default()).unwrap();
        let s = slices(&[3, 2]);
        let a = sample_channel_realization(&system, &s, 5, 42).unwrap();
        let b = sample_channel_realization(&system, &s, 5, 42).unwrap();
        assert_eq!(a, b);
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        a.export_jsonl(&mut bytes_a).unwrap();
        b.export_jsonl(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
        let back = ChannelRealization::import_jsonl(&bytes_a[..]).unwrap();
        assert_eq!(back, a);
        let c = sample_channel_realization(&system, &s, 5, 43).unwrap();
        assert_ne!(a.prbs[0], c.prbs[0]);
    }

    #[test]
    fn prb_streams_do_not_depend_on_frame_length() {
        let system = SystemModel::new(uma(), 16, 0.01, RateTable::default()).unwrap();
        let s = slices(&[2]);
        let short = sample_channel_realization(&system, &s, 3, 9).unwrap();
        let long = sample_channel_realization(&system, &s, 10, 9).unwrap();
        assert_eq!(short.prbs[..], long.prbs[..3]);
    }

    #[test]
    fn redraw_rule_keeps_every_user_above_lowest_mcs() {
        let system = SystemModel::new(uma(), 16, 0.01, RateTable::default()).unwrap();
        let s = slices(&[20, 20]);
        for seed in 0..5 {
            let r = sample_channel_realization(&system, &s, 1, seed).unwrap();
            for f in &r.large_scale {
                assert!(system.mean_single_user_snr(f.rho_linear) >= system.table.threshold(1));
                assert!(f.rho_linear > 0.0);
                assert_eq!(f.rho_db(), -(f.mean_pathloss_db + f.shadowing_db));
            }
            for (g, f) in r.users.iter().zip(&r.large_scale) {
                assert!(g.d3d_m >= g.d2d_m && g.d2d_m >= 0.0);
                assert!(g.d2d_m <= system.params.cell_radius_m);
                if !g.is_los {
                    assert_eq!(f.rician_k_linear, 0.0);
                }
            }
        }
    }

    #[test]
    fn infeasible_power_is_reported() {
        let mut p = uma();
        p.total_power_w_per_prb = 1e-30;
        let system = SystemModel::new(p, 4, 0.0, RateTable::default()).unwrap();
        let err = sample_channel_realization(&system, &slices(&[1]), 1, 1).unwrap_err();
        assert!(matches!(err, Error::InfeasibleScenario { slot: 0, .. }));
    }

    #[test]
    fn huge_rician_factor_approaches_los_vector() {
        let system = SystemModel::new(uma(), 16, 0.01, RateTable::default()).unwrap();
        let mut draw = draw_user(&system, 0, 0, 3).unwrap();
        draw.fading.rician_k_linear = 1e14;
        let row = channel_row(&system, &draw, 0, 0, 3);
        let sqrt_rho = draw.fading.rho_linear.sqrt();
        for (v, l) in row.iter().zip(&draw.los_phase) {
            assert_relative_eq!(v.norm(), sqrt_rho, max_relative = 1e-5);
            assert!((v / sqrt_rho - l).norm() < 1e-5);
        }
        let los_energy: f64 = draw.los_phase.iter().map(|z| z.norm_sqr()).sum();
        assert_relative_eq!(los_energy, 16.0, epsilon = 1e-12);
    }

    #[test]
    fn rayleigh_entries_have_unit_variance() {
        // Monte-Carlo moment oracle: kappa = 0, psi = 0.
        let mut p = uma();
        p.rician_mean_db = -300.0;
        p.rician_std_db = 0.0;
        let system = SystemModel::new(p, 4, 0.0, RateTable::default()).unwrap();
        let mut draw = draw_user(&system, 0, 0, 11).unwrap();
        draw.fading.rician_k_linear = 0.0;
        let rho = draw.fading.rho_linear;
        let mut sum = 0.0;
        let mut count = 0usize;
        for n in 0..25_000 {
            for v in channel_row(&system, &draw, n, 0, 11) {
                sum += v.norm_sqr() / rho;
                count += 1;
            }
        }
        let var = sum / count as f64;
        assert!((var - 1.0).abs() < 0.02, "sample variance {var}");
    }
}
