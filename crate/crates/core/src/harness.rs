//! Experiment configuration, seed campaigns, gain statistics and the files
//! they leave behind.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::statistics::{Data, Distribution, Max, Min, OrderStatistics};

use crate::channel_model::{
    calibrate_noise_power, sample_channel_realization, ChannelRealization, Scenario,
    ScenarioCatalog, SystemModel,
};
use crate::error::{Error, Result};
use crate::predictor::{
    mape, read_dataset, DatasetConfig, Estimator, EstimatorResponse, ExternalEstimator,
    FrameInputs, OracleEstimator, PerturbedEstimator, TableEstimator,
};
use crate::rate_function::RateTable;
use crate::scheduler::{
    benchmark_frame, build_slices, fgss_frame, relative_spread, FrameParams, FrameResult,
    LinkContext, PrbDecision, SelectionStrategy, SliceConfig, SPREAD_THRESHOLD,
};

/// How the receiver noise power is chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseModel {
    /// Thermal floor over one PRB plus the scenario noise figure.
    Thermal,
    /// Puts the `quantile` of single-user SNRs on the threshold of `level`.
    Calibrated {
        #[serde(default = "default_quantile")]
        quantile: f64,
        #[serde(default = "default_level")]
        level: usize,
        #[serde(default = "default_calibration_samples")]
        samples: usize,
    },
    Fixed {
        watts: f64,
    },
}

fn default_quantile() -> f64 {
    0.01
}
fn default_level() -> usize {
    2
}
fn default_calibration_samples() -> usize {
    20_000
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel::Calibrated {
            quantile: default_quantile(),
            level: default_level(),
            samples: default_calibration_samples(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorChoice {
    #[default]
    Oracle,
    Table {
        path: PathBuf,
    },
    External {
        command: Vec<String>,
    },
    /// Oracle targets times independent uniform factors in `[1 - a, 1 + a]`.
    Perturbed {
        amplitude: f64,
        #[serde(default)]
        salt: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceSpec {
    pub share: f64,
    pub users: usize,
}

/// Dataset grid: every `(share, users)` pair becomes a two-slice layout
/// `[(share, users), (1 - share, users)]`, or one slice when `share == 1`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetGrid {
    #[serde(default)]
    pub shares: Vec<f64>,
    #[serde(default)]
    pub users: Vec<usize>,
}

impl DatasetGrid {
    pub fn configs(&self) -> Vec<DatasetConfig> {
        let mut out = Vec::new();
        for &a in &self.shares {
            for &u in &self.users {
                let slices = if (a - 1.0).abs() < 1e-12 {
                    vec![(1.0, u)]
                } else {
                    vec![(a, u), (1.0 - a, u)]
                };
                out.push(DatasetConfig { slices });
            }
        }
        out
    }
}

/// Pass/fail limits checked by `run --check`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub min_isolation_rate: Option<f64>,
    pub min_spread_ok_rate: Option<f64>,
    pub min_mean_gain_pct: Option<f64>,
    pub max_mape_pct: Option<f64>,
}

fn default_rho() -> f64 {
    FrameParams::default().rho
}
fn default_epsilon() -> f64 {
    FrameParams::default().epsilon
}
fn default_cadence() -> usize {
    1
}
fn default_correlation() -> f64 {
    0.01
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Everything a campaign needs; read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub scenario: Scenario,
    /// Number of base-station antennas `M` (a perfect square).
    pub antennas: usize,
    #[serde(default = "default_correlation")]
    pub correlation: f64,
    /// Sub-channels per slot `C`.
    pub subchannels: usize,
    /// Slots per frame `T`; the frame has `C * T` PRBs.
    pub slots: usize,
    pub slices: Vec<SliceSpec>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_cadence")]
    pub cadence: usize,
    #[serde(default)]
    pub selection: SelectionStrategy,
    #[serde(default)]
    pub benchmark_selection: SelectionStrategy,
    #[serde(default)]
    pub k_grid: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub seed_start: u64,
    #[serde(default)]
    pub seed_count: usize,
    #[serde(default)]
    pub estimator: EstimatorChoice,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Optional replacement scenario catalog (TOML).
    #[serde(default)]
    pub scenario_file: Option<PathBuf>,
    /// Optional replacement rate table (TOML).
    #[serde(default)]
    pub rate_table_file: Option<PathBuf>,
    #[serde(default)]
    pub dataset: DatasetGrid,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config; relative paths inside it resolve against its directory.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = cfg.scenario_file.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.rate_table_file.as_mut() {
            rebase(p);
        }
        if let EstimatorChoice::Table { path } = &mut cfg.estimator {
            rebase(path);
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.subchannels == 0 || self.slots == 0 {
            return Err(Error::InvalidConfig(
                "subchannels and slots must be positive".into(),
            ));
        }
        self.slice_configs()?;
        self.frame_params().validate()?;
        self.benchmark_params().validate()?;
        if self.resolved_seeds().is_empty() {
            return Err(Error::InvalidConfig(
                "no seeds: set `seeds` or `seed_count`".into(),
            ));
        }
        if self.k_grid.contains(&0) {
            return Err(Error::InvalidConfig("K values must be at least 1".into()));
        }
        if let EstimatorChoice::Perturbed { amplitude, .. } = self.estimator {
            if !(0.0..1.0).contains(&amplitude) {
                return Err(Error::InvalidConfig(
                    "perturbation amplitude must be in [0, 1)".into(),
                ));
            }
        }
        if let EstimatorChoice::External { command } = &self.estimator {
            if command.is_empty() {
                return Err(Error::InvalidConfig(
                    "external estimator needs a command".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn num_prbs(&self) -> usize {
        self.subchannels * self.slots
    }

    pub fn resolved_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            (self.seed_start..self.seed_start + self.seed_count as u64).collect()
        } else {
            self.seeds.clone()
        }
    }

    pub fn slice_configs(&self) -> Result<Vec<SliceConfig>> {
        let spec: Vec<(f64, usize)> = self.slices.iter().map(|s| (s.share, s.users)).collect();
        build_slices(&spec)
    }

    pub fn frame_params(&self) -> FrameParams {
        FrameParams {
            rho: self.rho,
            epsilon: self.epsilon,
            cadence: self.cadence,
            strategy: self.selection,
        }
    }

    pub fn benchmark_params(&self) -> FrameParams {
        FrameParams {
            strategy: self.benchmark_selection,
            ..self.frame_params()
        }
    }

    pub fn system(&self) -> Result<SystemModel> {
        let catalog = match &self.scenario_file {
            Some(p) => ScenarioCatalog::from_path(p)?,
            None => ScenarioCatalog::default(),
        };
        let table = match &self.rate_table_file {
            Some(p) => RateTable::from_path(p)?,
            None => RateTable::default(),
        };
        let params = catalog.get(self.scenario)?.clone();
        let noise = match self.noise {
            NoiseModel::Thermal => None,
            NoiseModel::Calibrated {
                quantile,
                level,
                samples,
            } => Some(calibrate_noise_power(
                &params,
                self.antennas,
                &table,
                quantile,
                level,
                samples,
            )?),
            NoiseModel::Fixed { watts } => Some(watts),
        };
        let system = SystemModel::new(params, self.antennas, self.correlation, table)?;
        match noise {
            Some(w) => system.with_noise_power(w),
            None => Ok(system),
        }
    }
}

/// Result of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Exact benchmark geomeans.
    pub benchmark: Vec<f64>,
    /// Targets the scheduler actually used.
    pub targets: Vec<f64>,
    pub estimator_id: String,
    /// Frame result with gains measured against the exact benchmark.
    pub frame: FrameResult,
}

impl SeedOutcome {
    pub fn mean_gain_pct(&self) -> f64 {
        let g = &self.frame.gains;
        100.0 * (g.iter().sum::<f64>() / g.len() as f64 - 1.0)
    }

    pub fn isolated(&self) -> bool {
        self.frame.gains.iter().all(|&x| x >= 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p10: f64,
    pub p25: f64,
    pub median: f64,
    pub p75: f64,
    pub p90: f64,
    pub mean: f64,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut data = Data::new(values.to_vec());
        Some(Self {
            p10: data.quantile(0.10),
            p25: data.lower_quartile(),
            median: data.median(),
            p75: data.upper_quartile(),
            p90: data.quantile(0.90),
            mean: data.mean().unwrap_or(f64::NAN),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.p75 - self.p25
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainStats {
    pub seeds: usize,
    pub failed_seeds: usize,
    /// Over every (seed, slice) pair, in percent: `(xi - 1) * 100`.
    pub slice_gain_pct: Option<Percentiles>,
    /// Over seeds, of the slice-mean gain in percent.
    pub mean_gain_pct: Option<Percentiles>,
    /// Seeds where some slice ended below its benchmark.
    pub isolation_violations: usize,
    pub isolation_rate: f64,
    /// Seeds whose end-of-frame relative spread is within the threshold.
    pub spread_ok_rate: f64,
    /// Fraction of seeds reaching the spread threshold by half the frame.
    pub converged_by_half_rate: f64,
    pub convergence_prb: Option<Percentiles>,
    pub bandwidth_savings: Option<Percentiles>,
    pub weight_anomalies: usize,
}

impl GainStats {
    pub fn from_outcomes(outcomes: &[SeedOutcome], failures: usize) -> Self {
        let n = outcomes.len();
        let rate = |k: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
        let slice_gains: Vec<f64> = outcomes
            .iter()
            .flat_map(|o| o.frame.gains.iter().map(|g| 100.0 * (g - 1.0)))
            .collect();
        let mean_gains: Vec<f64> = outcomes.iter().map(SeedOutcome::mean_gain_pct).collect();
        let violations = outcomes.iter().filter(|o| !o.isolated()).count();
        let spread_ok = outcomes
            .iter()
            .filter(|o| o.frame.spread() <= SPREAD_THRESHOLD)
            .count();
        let half = |o: &SeedOutcome| o.frame.gain_trace.len() / 2;
        let converged = outcomes
            .iter()
            .filter(|o| o.frame.convergence_prb().is_some_and(|p| p <= half(o)))
            .count();
        let conv: Vec<f64> = outcomes
            .iter()
            .filter_map(|o| o.frame.convergence_prb().map(|p| p as f64))
            .collect();
        let savings: Vec<f64> = outcomes
            .iter()
            .map(|o| o.frame.bandwidth_savings())
            .collect();
        Self {
            seeds: n,
            failed_seeds: failures,
            slice_gain_pct: Percentiles::of(&slice_gains),
            mean_gain_pct: Percentiles::of(&mean_gains),
            isolation_violations: violations,
            isolation_rate: rate(n - violations),
            spread_ok_rate: rate(spread_ok),
            converged_by_half_rate: rate(converged),
            convergence_prb: Percentiles::of(&conv),
            bandwidth_savings: Percentiles::of(&savings),
            weight_anomalies: outcomes.iter().map(|o| o.frame.weight_anomalies).sum(),
        }
    }

    /// Names of the configured thresholds this campaign misses.
    pub fn check(&self, thresholds: &Thresholds) -> Vec<String> {
        let mut failed = Vec::new();
        if let Some(min) = thresholds.min_isolation_rate {
            if self.isolation_rate < min {
                failed.push(format!("isolation rate {:.3} < {min}", self.isolation_rate));
            }
        }
        if let Some(min) = thresholds.min_spread_ok_rate {
            if self.spread_ok_rate < min {
                failed.push(format!("spread-ok rate {:.3} < {min}", self.spread_ok_rate));
            }
        }
        if let Some(min) = thresholds.min_mean_gain_pct {
            let mean = self
                .mean_gain_pct
                .as_ref()
                .map_or(f64::NEG_INFINITY, |p| p.mean);
            if mean < min {
                failed.push(format!("mean gain {mean:.2}% < {min}%"));
            }
        }
        failed
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    pub config: ExperimentConfig,
    pub noise_power_w: f64,
    pub outcomes: Vec<SeedOutcome>,
    pub failures: Vec<SeedFailure>,
    pub stats: GainStats,
}

impl Campaign {
    /// More than a tenth of the seeds failed.
    pub fn too_many_failures(&self) -> bool {
        let total = self.outcomes.len() + self.failures.len();
        self.failures.len() * 10 > total
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory receiving one `seed-<s>.jsonl` PRB trace per seed.
    pub trace_dir: Option<PathBuf>,
}

struct Prepared {
    seed: u64,
    realization: ChannelRealization,
    benchmark: Vec<f64>,
}

fn prepare_seed(
    cfg: &ExperimentConfig,
    system: &SystemModel,
    slices: &[SliceConfig],
    seed: u64,
    trace_dir: Option<&Path>,
) -> Result<Prepared> {
    let realization = sample_channel_realization(system, slices, cfg.num_prbs(), seed)?;
    let link = LinkContext::from_system(system);
    let mut writer = open_trace(trace_dir, &format!("benchmark-seed-{seed}.jsonl"))?;
    let mut io_error = None;
    let mut cb = |d: &PrbDecision| write_trace(&mut writer, d, &mut io_error);
    let bench = benchmark_frame(
        &realization,
        slices,
        cfg.subchannels,
        link,
        &cfg.benchmark_params(),
        trace_dir.map(|_| &mut cb as &mut dyn FnMut(&PrbDecision)),
    )?;
    finish_trace(writer, io_error)?;
    Ok(Prepared {
        seed,
        realization,
        benchmark: bench.targets,
    })
}

fn open_trace(dir: Option<&Path>, name: &str) -> Result<Option<BufWriter<File>>> {
    match dir {
        Some(d) => Ok(Some(BufWriter::new(File::create(d.join(name))?))),
        None => Ok(None),
    }
}

fn write_trace(
    writer: &mut Option<BufWriter<File>>,
    d: &PrbDecision,
    err: &mut Option<std::io::Error>,
) {
    if let (Some(w), None) = (writer.as_mut(), err.as_ref()) {
        let res = serde_json::to_writer(&mut *w, d)
            .map_err(std::io::Error::from)
            .and_then(|_| w.write_all(b"\n"));
        if let Err(e) = res {
            *err = Some(e);
        }
    }
}

fn finish_trace(writer: Option<BufWriter<File>>, err: Option<std::io::Error>) -> Result<()> {
    if let Some(e) = err {
        return Err(e.into());
    }
    if let Some(mut w) = writer {
        w.flush()?;
    }
    Ok(())
}

fn make_estimator(choice: &EstimatorChoice) -> Result<Box<dyn Estimator>> {
    Ok(match choice {
        EstimatorChoice::Oracle => Box::new(OracleEstimator),
        EstimatorChoice::Table { path } => Box::new(TableEstimator::from_path(path)?),
        EstimatorChoice::External { command } => Box::new(ExternalEstimator::spawn(
            "external",
            &command[0],
            &command[1..],
        )?),
        EstimatorChoice::Perturbed { amplitude, salt } => Box::new(PerturbedEstimator {
            inner: OracleEstimator,
            amplitude: *amplitude,
            salt: *salt,
        }),
    })
}

/// Runs benchmark and sharing frames for every seed.
///
/// Realizations and benchmarks are computed in parallel, targets are then
/// requested from the estimator in seed order, and the sharing frames run in
/// parallel again. Results are merged by seed order. Failing seeds are
/// recorded and excluded.
pub fn run_campaign(cfg: &ExperimentConfig, options: &RunOptions) -> Result<Campaign> {
    cfg.validate()?;
    let system = cfg.system()?;
    let slices = cfg.slice_configs()?;
    let seeds = cfg.resolved_seeds();
    if let Some(d) = &options.trace_dir {
        fs::create_dir_all(d)?;
    }
    let trace_dir = options.trace_dir.as_deref();
    let prepared: Vec<(u64, Result<Prepared>)> = seeds
        .par_iter()
        .map(|&s| (s, prepare_seed(cfg, &system, &slices, s, trace_dir)))
        .collect();

    let mut failures = Vec::new();
    let mut ready = Vec::new();
    let mut estimator = match cfg.estimator {
        EstimatorChoice::Oracle => None,
        ref other => Some(make_estimator(other)?),
    };
    let link = LinkContext::from_system(&system);
    let bench_params = cfg.benchmark_params();
    for (seed, p) in prepared {
        let p = match p {
            Ok(p) => p,
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
                continue;
            }
        };
        let targets: Result<Vec<EstimatorResponse>> = match estimator.as_mut() {
            None => Ok(p
                .benchmark
                .iter()
                .map(|&t| EstimatorResponse {
                    pred_gm_bps: t,
                    estimator_id: "oracle".into(),
                    model_version: crate::predictor::ORACLE_VERSION.into(),
                })
                .collect()),
            Some(est) => est.estimate_frame(&FrameInputs {
                scenario: cfg.scenario,
                realization: &p.realization,
                slices: &slices,
                num_subchannels: cfg.subchannels,
                link,
                params: &bench_params,
            }),
        };
        match targets {
            Ok(t) => ready.push((p, t)),
            Err(e) => {
                log::warn!("seed {seed}: estimator failed: {e}");
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }

    let params = cfg.frame_params();
    let frames: Vec<(u64, Result<SeedOutcome>)> = ready
        .par_iter()
        .map(|(p, t)| {
            let run = || -> Result<SeedOutcome> {
                let targets: Vec<f64> = t.iter().map(|r| r.pred_gm_bps).collect();
                let mut writer = open_trace(trace_dir, &format!("seed-{}.jsonl", p.seed))?;
                let mut io_error = None;
                let mut cb = |d: &PrbDecision| write_trace(&mut writer, d, &mut io_error);
                let frame = fgss_frame(
                    &p.realization,
                    &slices,
                    &targets,
                    link,
                    &params,
                    trace_dir.map(|_| &mut cb as &mut dyn FnMut(&PrbDecision)),
                )?;
                finish_trace(writer, io_error)?;
                Ok(SeedOutcome {
                    seed: p.seed,
                    frame: rescale_gains(frame, &p.benchmark),
                    benchmark: p.benchmark.clone(),
                    targets,
                    estimator_id: t
                        .first()
                        .map(|r| r.estimator_id.clone())
                        .unwrap_or_default(),
                })
            };
            (p.seed, run())
        })
        .collect();

    let mut outcomes = Vec::new();
    for (seed, r) in frames {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => {
                log::warn!("seed {seed} failed: {e}");
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    failures.sort_by_key(|f| f.seed);
    let stats = GainStats::from_outcomes(&outcomes, failures.len());
    Ok(Campaign {
        config: cfg.clone(),
        noise_power_w: system.noise_power_w,
        outcomes,
        failures,
        stats,
    })
}

/// Re-expresses gains against `exact` benchmark geomeans instead of the
/// targets the frame was driven with.
pub fn rescale_gains(mut frame: FrameResult, exact: &[f64]) -> FrameResult {
    let factors: Vec<f64> = frame
        .targets
        .iter()
        .zip(exact)
        .map(|(t, e)| t / e)
        .collect();
    for (g, f) in frame.gains.iter_mut().zip(&factors) {
        *g *= f;
    }
    for row in &mut frame.gain_trace {
        for (g, f) in row.iter_mut().zip(&factors) {
            *g *= f;
        }
    }
    frame
}

pub const SUMMARY_FILE: &str = "summary.json";
pub const PER_SEED_FILE: &str = "per_seed.csv";
pub const CDF_FILE: &str = "cdf.csv";
pub const CONVERGENCE_FILE: &str = "convergence.csv";
pub const BOXPLOT_FILE: &str = "boxplot.csv";
pub const GAIN_VS_K_FILE: &str = "gain_vs_k.csv";
pub const MAPE_FILE: &str = "mape.csv";

#[derive(Serialize, Deserialize)]
struct Summary {
    name: String,
    noise_power_w: f64,
    stats: GainStats,
    seeds: Vec<SeedSummary>,
    failures: Vec<SeedFailure>,
}

#[derive(Serialize, Deserialize)]
struct SeedSummary {
    seed: u64,
    estimator_id: String,
    benchmark: Vec<f64>,
    targets: Vec<f64>,
    geomeans: Vec<f64>,
    gains: Vec<f64>,
    spread: f64,
    convergence_prb: Option<usize>,
    settled_prb: Option<usize>,
    bandwidth_savings: f64,
}

#[derive(Serialize)]
struct PerSeedRow {
    seed: u64,
    slice: usize,
    benchmark_gm_bps: f64,
    target_gm_bps: f64,
    geomean_bps: f64,
    gain: f64,
    gain_pct: f64,
    spread: f64,
    convergence_prb: Option<usize>,
    settled_prb: Option<usize>,
    bandwidth_savings: f64,
}

#[derive(Serialize, Deserialize)]
struct CdfRow {
    gain: f64,
    cdf: f64,
}

#[derive(Serialize, Deserialize)]
struct ConvergenceRow {
    seed: u64,
    prb: usize,
    slice: usize,
    gain: f64,
}

#[derive(Serialize, Deserialize)]
struct BoxplotRow {
    label: String,
    p10: f64,
    p25: f64,
    median: f64,
    p75: f64,
    p90: f64,
    mean: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    Ok(csv::Writer::from_writer(File::create(path)?))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes summary JSON, per-seed CSV, CDF, convergence traces and boxplot row.
pub fn write_campaign(campaign: &Campaign, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let summary = Summary {
        name: campaign.config.name.clone(),
        noise_power_w: campaign.noise_power_w,
        stats: campaign.stats.clone(),
        seeds: campaign
            .outcomes
            .iter()
            .map(|o| SeedSummary {
                seed: o.seed,
                estimator_id: o.estimator_id.clone(),
                benchmark: o.benchmark.clone(),
                targets: o.targets.clone(),
                geomeans: o.frame.geomeans.clone(),
                gains: o.frame.gains.clone(),
                spread: o.frame.spread(),
                convergence_prb: o.frame.convergence_prb(),
                settled_prb: o.frame.settled_prb(),
                bandwidth_savings: o.frame.bandwidth_savings(),
            })
            .collect(),
        failures: campaign.failures.clone(),
    };
    let summary_path = dir.join(SUMMARY_FILE);
    let mut f = BufWriter::new(File::create(&summary_path)?);
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    f.flush()?;

    let per_seed_path = dir.join(PER_SEED_FILE);
    let mut w = csv_writer(&per_seed_path)?;
    for o in &campaign.outcomes {
        for q in 0..o.frame.gains.len() {
            w.serialize(PerSeedRow {
                seed: o.seed,
                slice: q,
                benchmark_gm_bps: o.benchmark[q],
                target_gm_bps: o.targets[q],
                geomean_bps: o.frame.geomeans[q],
                gain: o.frame.gains[q],
                gain_pct: 100.0 * (o.frame.gains[q] - 1.0),
                spread: o.frame.spread(),
                convergence_prb: o.frame.convergence_prb(),
                settled_prb: o.frame.settled_prb(),
                bandwidth_savings: o.frame.bandwidth_savings(),
            })
            .map_err(csv_err)?;
        }
    }
    w.flush()?;

    let cdf_path = dir.join(CDF_FILE);
    let mut gains: Vec<f64> = campaign
        .outcomes
        .iter()
        .flat_map(|o| o.frame.gains.iter().copied())
        .collect();
    gains.sort_by(f64::total_cmp);
    let mut w = csv_writer(&cdf_path)?;
    let total = gains.len() as f64;
    for (i, g) in gains.iter().enumerate() {
        w.serialize(CdfRow {
            gain: *g,
            cdf: (i + 1) as f64 / total,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;

    let conv_path = dir.join(CONVERGENCE_FILE);
    let mut w = csv_writer(&conv_path)?;
    for o in &campaign.outcomes {
        for (i, row) in o.frame.gain_trace.iter().enumerate() {
            for (q, g) in row.iter().enumerate() {
                w.serialize(ConvergenceRow {
                    seed: o.seed,
                    prb: i + 1,
                    slice: q,
                    gain: *g,
                })
                .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;

    let box_path = dir.join(BOXPLOT_FILE);
    let mut w = csv_writer(&box_path)?;
    if let Some(p) = &campaign.stats.mean_gain_pct {
        w.serialize(BoxplotRow {
            label: campaign.config.name.clone(),
            p10: p.p10,
            p25: p.p25,
            median: p.median,
            p75: p.p75,
            p90: p.p90,
            mean: p.mean,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(vec![
        summary_path,
        per_seed_path,
        cdf_path,
        conv_path,
        box_path,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneKRow {
    /// `None` marks the offline-reference row.
    pub k: Option<usize>,
    /// Mean over seeds of the slice-mean normalized gain.
    pub mean_gain: f64,
    pub std_gain: f64,
    pub mean_gain_pct: f64,
    pub isolation_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneKReport {
    pub best_k: usize,
    pub rows: Vec<TuneKRow>,
    pub reference: Option<TuneKRow>,
}

impl TuneKReport {
    pub fn row(&self, k: usize) -> Option<&TuneKRow> {
        self.rows.iter().find(|r| r.k == Some(k))
    }

    pub fn best(&self) -> &TuneKRow {
        self.row(self.best_k).expect("best K is in the grid")
    }

    pub fn worst(&self) -> &TuneKRow {
        self.rows
            .iter()
            .min_by(|a, b| a.mean_gain.total_cmp(&b.mean_gain))
            .expect("non-empty grid")
    }
}

fn tune_row(k: Option<usize>, outcomes: &[SeedOutcome]) -> TuneKRow {
    let per_seed: Vec<f64> = outcomes
        .iter()
        .map(|o| o.frame.gains.iter().sum::<f64>() / o.frame.gains.len() as f64)
        .collect();
    let data = Data::new(per_seed.clone());
    let n = per_seed.len();
    TuneKRow {
        k,
        mean_gain: data.mean().unwrap_or(f64::NAN),
        std_gain: if n > 1 {
            data.std_dev().unwrap_or(0.0)
        } else {
            0.0
        },
        mean_gain_pct: 100.0 * (data.mean().unwrap_or(f64::NAN) - 1.0),
        isolation_rate: outcomes.iter().filter(|o| o.isolated()).count() as f64 / n.max(1) as f64,
    }
}

/// Runs the sharing frame per K of the grid on shared realizations and
/// benchmarks, returning the K with the highest mean gain. Ties go to the
/// smaller K. With `with_reference` the offline reference is run as well.
pub fn tune_k(cfg: &ExperimentConfig, grid: &[usize], with_reference: bool) -> Result<TuneKReport> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("empty K grid".into()));
    }
    cfg.validate()?;
    let system = cfg.system()?;
    let slices = cfg.slice_configs()?;
    let prepared = cfg
        .resolved_seeds()
        .par_iter()
        .map(|&s| prepare_seed(cfg, &system, &slices, s, None))
        .collect::<Result<Vec<_>>>()?;
    let link = LinkContext::from_system(&system);
    let run = |strategy: SelectionStrategy| -> Result<Vec<SeedOutcome>> {
        let params = FrameParams {
            strategy,
            ..cfg.frame_params()
        };
        prepared
            .par_iter()
            .map(|p| {
                let frame = fgss_frame(&p.realization, &slices, &p.benchmark, link, &params, None)?;
                Ok(SeedOutcome {
                    seed: p.seed,
                    benchmark: p.benchmark.clone(),
                    targets: p.benchmark.clone(),
                    estimator_id: "oracle".into(),
                    frame,
                })
            })
            .collect()
    };
    let mut rows = Vec::with_capacity(grid.len());
    for &k in grid {
        rows.push(tune_row(Some(k), &run(SelectionStrategy::Online { k })?));
    }
    let reference = if with_reference {
        Some(tune_row(None, &run(SelectionStrategy::OfflineReference)?))
    } else {
        None
    };
    let best_k = rows
        .iter()
        .fold(None::<&TuneKRow>, |best, r| match best {
            Some(b) if b.mean_gain >= r.mean_gain => Some(b),
            _ => Some(r),
        })
        .and_then(|r| r.k)
        .expect("non-empty grid");
    Ok(TuneKReport {
        best_k,
        rows,
        reference,
    })
}

#[derive(Serialize, Deserialize)]
struct GainVsKRow {
    k: String,
    mean_gain: f64,
    std_gain: f64,
    mean_gain_pct: f64,
    isolation_rate: f64,
}

pub fn write_tune_k(report: &TuneKReport, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(GAIN_VS_K_FILE);
    let mut w = csv_writer(&path)?;
    for r in report.rows.iter().chain(&report.reference) {
        w.serialize(GainVsKRow {
            k: r.k
                .map_or_else(|| "offline_reference".to_string(), |k| k.to_string()),
            mean_gain: r.mean_gain,
            std_gain: r.std_gain,
            mean_gain_pct: r.mean_gain_pct,
            isolation_rate: r.isolation_rate,
        })
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(path)
}

/// Exports the labelled benchmark dataset of the config's `[dataset]` grid.
pub fn export_dataset(cfg: &ExperimentConfig, path: &Path) -> Result<usize> {
    cfg.validate()?;
    let system = cfg.system()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let file = File::create(path)?;
    crate::predictor::dataset_export(
        &system,
        cfg.scenario,
        cfg.subchannels,
        cfg.slots,
        &cfg.dataset.configs(),
        &cfg.resolved_seeds(),
        &cfg.benchmark_params(),
        file,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapeRow {
    pub seed: u64,
    pub share: f64,
    pub users: usize,
    pub truth_gm_bps: f64,
    pub pred_gm_bps: f64,
    pub ape_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapeReport {
    pub estimator_id: String,
    pub records: usize,
    pub mape_pct: f64,
    pub by_share: Vec<(f64, f64)>,
    pub by_users: Vec<(usize, f64)>,
    pub rows: Vec<MapeRow>,
}

/// Scores `estimator` against the labels of a dataset file. Each record is
/// sent as its own request.
pub fn predict_check(
    dataset: &Path,
    subchannels: usize,
    estimator: &mut dyn FnMut(&crate::predictor::EstimatorRequest) -> Result<EstimatorResponse>,
) -> Result<MapeReport> {
    let file = File::open(dataset).map_err(|_| Error::MissingArtifact(dataset.to_path_buf()))?;
    let records = read_dataset(BufReader::new(file))?;
    let mut rows = Vec::with_capacity(records.len());
    let mut id = String::new();
    for r in &records {
        let resp = estimator(&r.request())?;
        id = resp.estimator_id.clone();
        rows.push(MapeRow {
            seed: r.seed,
            share: r.subchannels as f64 / subchannels as f64,
            users: r.num_users,
            truth_gm_bps: r.label_gm_bps,
            pred_gm_bps: resp.pred_gm_bps,
            ape_pct: 100.0 * ((r.label_gm_bps - resp.pred_gm_bps) / r.label_gm_bps).abs(),
        });
    }
    let truth: Vec<f64> = rows.iter().map(|r| r.truth_gm_bps).collect();
    let pred: Vec<f64> = rows.iter().map(|r| r.pred_gm_bps).collect();
    let bucket = |key: &dyn Fn(&MapeRow) -> String| {
        let mut groups: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
        for r in &rows {
            groups.entry(key(r)).or_default().push(r.ape_pct);
        }
        groups
    };
    let by_share = bucket(&|r| format!("{:.4}", r.share))
        .into_iter()
        .map(|(k, v)| (k.parse().unwrap(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    let mut by_users: Vec<(usize, f64)> = bucket(&|r| format!("{:08}", r.users))
        .into_iter()
        .map(|(k, v)| (k.parse().unwrap(), v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    by_users.sort_by_key(|x| x.0);
    Ok(MapeReport {
        estimator_id: id,
        records: rows.len(),
        mape_pct: mape(&truth, &pred),
        by_share,
        by_users,
        rows,
    })
}

pub fn write_mape(report: &MapeReport, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join(MAPE_FILE);
    let mut w = csv_writer(&path)?;
    for r in &report.rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(path)
}

/// Plot families produced by [`emit_plots`], one CSV each.
pub const PLOT_FAMILIES: [&str; 6] = [
    "cdf",
    "convergence",
    "boxplot",
    "mape_vs_share",
    "mape_vs_users",
    "gain_vs_k",
];

#[derive(Serialize)]
struct ConvergenceBand {
    prb: usize,
    slice: usize,
    min: f64,
    median: f64,
    max: f64,
}

#[derive(Serialize)]
struct MapeBucket<K: Serialize> {
    key: K,
    mape_pct: f64,
    records: usize,
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r =
        csv::Reader::from_path(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(csv_err)
}

/// Turns campaign, K-sweep and MAPE artifacts in `artifacts` into the six
/// plot-data files in `out`. Every input is read and checked before anything
/// is written.
pub fn emit_plots(artifacts: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let need = |name: &str| -> Result<PathBuf> {
        let p = artifacts.join(name);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact(p))
        }
    };
    let summary_path = need(SUMMARY_FILE)?;
    let summary: Summary = serde_json::from_reader(BufReader::new(File::open(&summary_path)?))?;
    if summary.seeds.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} holds no successful seeds",
            summary_path.display()
        )));
    }
    let cdf: Vec<CdfRow> = read_csv(&need(CDF_FILE)?)?;
    let conv: Vec<ConvergenceRow> = read_csv(&need(CONVERGENCE_FILE)?)?;
    let boxes: Vec<BoxplotRow> = read_csv(&need(BOXPLOT_FILE)?)?;
    let ks: Vec<GainVsKRow> = read_csv(&need(GAIN_VS_K_FILE)?)?;
    let mapes: Vec<MapeRow> = read_csv(&need(MAPE_FILE)?)?;

    let mut bands: std::collections::BTreeMap<(usize, usize), Vec<f64>> = Default::default();
    for r in &conv {
        bands.entry((r.prb, r.slice)).or_default().push(r.gain);
    }
    let bands: Vec<ConvergenceBand> = bands
        .into_iter()
        .map(|((prb, slice), v)| {
            let mut d = Data::new(v);
            ConvergenceBand {
                prb,
                slice,
                min: d.min(),
                median: d.median(),
                max: d.max(),
            }
        })
        .collect();
    let mut share_groups: std::collections::BTreeMap<String, (f64, Vec<f64>)> = Default::default();
    let mut user_groups: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for r in &mapes {
        share_groups
            .entry(format!("{:.4}", r.share))
            .or_insert_with(|| (r.share, Vec::new()))
            .1
            .push(r.ape_pct);
        user_groups.entry(r.users).or_default().push(r.ape_pct);
    }

    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut emit = |name: &str, f: &dyn Fn(&mut csv::Writer<File>) -> Result<()>| -> Result<()> {
        let path = out.join(format!("{name}.csv"));
        let mut w = csv_writer(&path)?;
        f(&mut w)?;
        w.flush()?;
        written.push(path);
        Ok(())
    };
    emit("cdf", &|w| {
        cdf.iter().try_for_each(|r| w.serialize(r).map_err(csv_err))
    })?;
    emit("convergence", &|w| {
        bands
            .iter()
            .try_for_each(|r| w.serialize(r).map_err(csv_err))
    })?;
    emit("boxplot", &|w| {
        boxes
            .iter()
            .try_for_each(|r| w.serialize(r).map_err(csv_err))
    })?;
    emit("mape_vs_share", &|w| {
        share_groups.values().try_for_each(|(share, v)| {
            w.serialize(MapeBucket {
                key: *share,
                mape_pct: v.iter().sum::<f64>() / v.len() as f64,
                records: v.len(),
            })
            .map_err(csv_err)
        })
    })?;
    emit("mape_vs_users", &|w| {
        user_groups.iter().try_for_each(|(u, v)| {
            w.serialize(MapeBucket {
                key: *u,
                mape_pct: v.iter().sum::<f64>() / v.len() as f64,
                records: v.len(),
            })
            .map_err(csv_err)
        })
    })?;
    emit("gain_vs_k", &|w| {
        ks.iter().try_for_each(|r| w.serialize(r).map_err(csv_err))
    })?;
    Ok(written)
}

/// Relative spread across slices at every PRB of a frame.
pub fn spread_trace(frame: &FrameResult) -> Vec<f64> {
    frame
        .gain_trace
        .iter()
        .map(|g| relative_spread(g))
        .collect()
}
