//! Benchmark targets for the sharing scheduler: exact oracle, lookup table,
//! external line-protocol model, plus the labelled dataset those models
//! train on.
//!
//! Wire formats, one JSON object per line:
//!
//! * dataset record: `{"scenario", "M", "N", "C_q", "U_q", "rho_db", "label_gm_bps", "seed"}`,
//!   preceded by a header line `{"schema": "fgss-benchmark-dataset", "version": 1}`;
//! * request: a dataset record without `label_gm_bps`;
//! * response: `{"pred_gm_bps": f64, "model_version": str}`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel_model::{sample_channel_realization, ChannelRealization, Scenario, SystemModel};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamDomain};
use crate::scheduler::{
    benchmark_frame, partition_subchannels, FrameParams, LinkContext, SliceConfig,
};

pub const DATASET_SCHEMA: &str = "fgss-benchmark-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Per-slice features from which a benchmark geomean is estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorRequest {
    pub scenario: Scenario,
    #[serde(rename = "M")]
    pub num_antennas: usize,
    #[serde(rename = "N")]
    pub frame_prbs: usize,
    #[serde(rename = "C_q")]
    pub subchannels: usize,
    #[serde(rename = "U_q")]
    pub num_users: usize,
    pub rho_db: Vec<f64>,
    pub seed: u64,
}

impl EstimatorRequest {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0 || self.subchannels == 0 {
            return Err(Error::MalformedRecord(
                "U_q and C_q must be at least 1".into(),
            ));
        }
        if self.rho_db.len() != self.num_users {
            return Err(Error::MalformedRecord(format!(
                "{} rho_db values for U_q = {}",
                self.rho_db.len(),
                self.num_users
            )));
        }
        if self.rho_db.iter().any(|r| !r.is_finite()) {
            return Err(Error::MalformedRecord("rho_db must be finite".into()));
        }
        Ok(())
    }

    /// Canonical cache and table key.
    pub fn key(&self) -> String {
        serde_json::to_string(self).expect("request serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub scenario: Scenario,
    #[serde(rename = "M")]
    pub num_antennas: usize,
    #[serde(rename = "N")]
    pub frame_prbs: usize,
    #[serde(rename = "C_q")]
    pub subchannels: usize,
    #[serde(rename = "U_q")]
    pub num_users: usize,
    pub rho_db: Vec<f64>,
    pub label_gm_bps: f64,
    pub seed: u64,
}

impl DatasetRecord {
    pub fn new(request: EstimatorRequest, label_gm_bps: f64) -> Self {
        Self {
            scenario: request.scenario,
            num_antennas: request.num_antennas,
            frame_prbs: request.frame_prbs,
            subchannels: request.subchannels,
            num_users: request.num_users,
            rho_db: request.rho_db,
            label_gm_bps,
            seed: request.seed,
        }
    }

    pub fn request(&self) -> EstimatorRequest {
        EstimatorRequest {
            scenario: self.scenario,
            num_antennas: self.num_antennas,
            frame_prbs: self.frame_prbs,
            subchannels: self.subchannels,
            num_users: self.num_users,
            rho_db: self.rho_db.clone(),
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.request().validate()?;
        if !(self.label_gm_bps > 0.0 && self.label_gm_bps.is_finite()) {
            return Err(Error::MalformedRecord(format!(
                "label {} is not positive",
                self.label_gm_bps
            )));
        }
        Ok(())
    }
}

/// Response as it travels on the wire.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub pred_gm_bps: f64,
    pub model_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResponse {
    pub pred_gm_bps: f64,
    pub estimator_id: String,
    pub model_version: String,
}

/// Parses and validates one response line.
pub fn parse_response_line(line: &str) -> Result<WireResponse> {
    let wire: WireResponse = serde_json::from_str(line.trim())
        .map_err(|e| Error::MalformedResponse(format!("{e}: {}", line.trim())))?;
    if !(wire.pred_gm_bps > 0.0 && wire.pred_gm_bps.is_finite()) {
        return Err(Error::MalformedResponse(format!(
            "prediction {} is not positive",
            wire.pred_gm_bps
        )));
    }
    Ok(wire)
}

/// Parses one request line.
pub fn parse_request_line(line: &str) -> Result<EstimatorRequest> {
    let request: EstimatorRequest =
        serde_json::from_str(line.trim()).map_err(|e| Error::MalformedRecord(e.to_string()))?;
    request.validate()?;
    Ok(request)
}

/// Everything needed to compute the static-share benchmark of one frame.
#[derive(Clone, Copy)]
pub struct FrameInputs<'a> {
    pub scenario: Scenario,
    pub realization: &'a ChannelRealization,
    pub slices: &'a [SliceConfig],
    pub num_subchannels: usize,
    pub link: LinkContext<'a>,
    pub params: &'a FrameParams,
}

impl<'a> FrameInputs<'a> {
    /// One request per slice, in slice order.
    pub fn requests(&self) -> Vec<EstimatorRequest> {
        let shares: Vec<f64> = self.slices.iter().map(|s| s.share).collect();
        let counts = partition_subchannels(&shares, self.num_subchannels);
        self.slices
            .iter()
            .zip(counts)
            .map(|(s, c)| EstimatorRequest {
                scenario: self.scenario,
                num_antennas: self.realization.num_antennas,
                frame_prbs: self.realization.num_prbs(),
                subchannels: c,
                num_users: s.users.len(),
                rho_db: self.realization.rho_db(&s.users),
                seed: self.realization.rng_seed,
            })
            .collect()
    }
}

/// Source of per-slice benchmark targets for one frame.
pub trait Estimator {
    fn id(&self) -> &str;

    /// One response per slice, in slice order.
    fn estimate_frame(&mut self, inputs: &FrameInputs<'_>) -> Result<Vec<EstimatorResponse>>;
}

/// Computes the benchmark exactly by running it.
#[derive(Clone, Debug, Default)]
pub struct OracleEstimator;

pub const ORACLE_VERSION: &str = concat!("oracle-", env!("CARGO_PKG_VERSION"));

impl Estimator for OracleEstimator {
    fn id(&self) -> &str {
        "oracle"
    }

    fn estimate_frame(&mut self, inputs: &FrameInputs<'_>) -> Result<Vec<EstimatorResponse>> {
        let bench = benchmark_frame(
            inputs.realization,
            inputs.slices,
            inputs.num_subchannels,
            inputs.link,
            inputs.params,
            None,
        )?;
        Ok(bench
            .targets
            .into_iter()
            .map(|t| EstimatorResponse {
                pred_gm_bps: t,
                estimator_id: self.id().to_string(),
                model_version: ORACLE_VERSION.to_string(),
            })
            .collect())
    }
}

/// Precomputed predictions keyed on the exact request.
#[derive(Clone, Debug, Default)]
pub struct TableEstimator {
    entries: HashMap<String, WireResponse>,
}

/// One line of a prediction table: a request plus its response fields.
#[derive(Serialize, Deserialize)]
struct TableLine {
    #[serde(flatten)]
    request: EstimatorRequest,
    pred_gm_bps: f64,
    #[serde(default)]
    model_version: Option<String>,
}

impl TableEstimator {
    pub fn insert(&mut self, request: &EstimatorRequest, response: WireResponse) {
        self.entries.insert(request.key(), response);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Reads JSONL lines of request fields plus `pred_gm_bps` and an optional
    /// `model_version`. Blank lines are skipped.
    pub fn from_reader<R: BufRead>(input: R) -> Result<Self> {
        let mut table = Self::default();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let value: serde_json::Value = serde_json::from_str(&line)
                .map_err(|e| Error::MalformedRecord(format!("line {}: {e}", i + 1)))?;
            let mut obj = value
                .as_object()
                .cloned()
                .ok_or_else(|| Error::MalformedRecord(format!("line {}: not an object", i + 1)))?;
            let pred = obj.remove("pred_gm_bps");
            let version = obj.remove("model_version");
            let request: EstimatorRequest = serde_json::from_value(serde_json::Value::Object(obj))
                .map_err(|e| Error::MalformedRecord(format!("line {}: {e}", i + 1)))?;
            request.validate()?;
            let wire = WireResponse {
                pred_gm_bps: pred.and_then(|p| p.as_f64()).unwrap_or(f64::NAN),
                model_version: version
                    .and_then(|v| v.as_str().map(String::from))
                    .unwrap_or_else(|| "table".into()),
            };
            if !(wire.pred_gm_bps > 0.0 && wire.pred_gm_bps.is_finite()) {
                return Err(Error::MalformedRecord(format!(
                    "line {}: pred_gm_bps must be positive",
                    i + 1
                )));
            }
            table.insert(&request, wire);
        }
        Ok(table)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|_| Error::ModelUnavailable(format!("{} not readable", path.display())))?;
        Self::from_reader(BufReader::new(file))
    }

    pub fn write_line<W: Write>(
        out: &mut W,
        request: &EstimatorRequest,
        response: &WireResponse,
    ) -> Result<()> {
        let line = TableLine {
            request: request.clone(),
            pred_gm_bps: response.pred_gm_bps,
            model_version: Some(response.model_version.clone()),
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn lookup(&self, request: &EstimatorRequest) -> Result<EstimatorResponse> {
        let hit = self.entries.get(&request.key()).ok_or_else(|| {
            Error::ModelUnavailable(format!(
                "no table entry for seed {} (U_q = {})",
                request.seed, request.num_users
            ))
        })?;
        Ok(EstimatorResponse {
            pred_gm_bps: hit.pred_gm_bps,
            estimator_id: "table".into(),
            model_version: hit.model_version.clone(),
        })
    }
}

impl Estimator for TableEstimator {
    fn id(&self) -> &str {
        "table"
    }

    fn estimate_frame(&mut self, inputs: &FrameInputs<'_>) -> Result<Vec<EstimatorResponse>> {
        inputs.requests().iter().map(|r| self.lookup(r)).collect()
    }
}

/// External model speaking the line protocol on a child process's stdin/stdout.
pub struct ExternalEstimator {
    id: String,
    child: Child,
    stdin: BufWriter<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

impl ExternalEstimator {
    /// Spawns `program args...`. The process must answer every request line
    /// with exactly one response line.
    pub fn spawn(id: &str, program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::ModelUnavailable(format!("cannot start `{program}`: {e}")))?;
        let stdin = BufWriter::new(child.stdin.take().expect("piped stdin"));
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            id: id.to_string(),
            child,
            stdin,
            stdout,
        })
    }

    pub fn request(&mut self, request: &EstimatorRequest) -> Result<EstimatorResponse> {
        let unavailable =
            |e: std::io::Error| Error::ModelUnavailable(format!("estimator pipe: {e}"));
        serde_json::to_writer(&mut self.stdin, request)?;
        self.stdin.write_all(b"\n").map_err(unavailable)?;
        self.stdin.flush().map_err(unavailable)?;
        let mut line = String::new();
        if self.stdout.read_line(&mut line).map_err(unavailable)? == 0 {
            return Err(Error::ModelUnavailable(
                "estimator closed its output".into(),
            ));
        }
        let wire = parse_response_line(&line)?;
        Ok(EstimatorResponse {
            pred_gm_bps: wire.pred_gm_bps,
            estimator_id: self.id.clone(),
            model_version: wire.model_version,
        })
    }
}

impl Drop for ExternalEstimator {
    fn drop(&mut self) {
        let _ = self.stdin.flush();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Estimator for ExternalEstimator {
    fn id(&self) -> &str {
        &self.id
    }

    fn estimate_frame(&mut self, inputs: &FrameInputs<'_>) -> Result<Vec<EstimatorResponse>> {
        inputs.requests().iter().map(|r| self.request(r)).collect()
    }
}

/// Multiplies another estimator's predictions by independent factors drawn
/// uniformly from `[1 - amplitude, 1 + amplitude]`, one per slice and seed.
pub struct PerturbedEstimator<E> {
    pub inner: E,
    pub amplitude: f64,
    pub salt: u64,
}

impl<E: Estimator> Estimator for PerturbedEstimator<E> {
    fn id(&self) -> &str {
        "perturbed"
    }

    fn estimate_frame(&mut self, inputs: &FrameInputs<'_>) -> Result<Vec<EstimatorResponse>> {
        let seed = inputs.realization.rng_seed;
        let mut out = self.inner.estimate_frame(inputs)?;
        for (q, r) in out.iter_mut().enumerate() {
            let mut rng = stream(seed, StreamDomain::Perturbation, self.salt, q as u64);
            r.pred_gm_bps *= 1.0 + self.amplitude * (2.0 * rng.gen::<f64>() - 1.0);
            r.estimator_id = format!("perturbed:{}", r.estimator_id);
        }
        Ok(out)
    }
}

/// Reuses earlier responses for identical requests.
pub struct CachedEstimator<E> {
    pub inner: E,
    cache: HashMap<String, EstimatorResponse>,
    pub hits: usize,
}

impl<E> CachedEstimator<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: HashMap::new(),
            hits: 0,
        }
    }
}

impl<E: Estimator> Estimator for CachedEstimator<E> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn estimate_frame(&mut self, inputs: &FrameInputs<'_>) -> Result<Vec<EstimatorResponse>> {
        let keys: Vec<String> = inputs.requests().iter().map(|r| r.key()).collect();
        if keys.iter().all(|k| self.cache.contains_key(k)) {
            self.hits += 1;
            return Ok(keys.iter().map(|k| self.cache[k].clone()).collect());
        }
        let fresh = self.inner.estimate_frame(inputs)?;
        for (k, r) in keys.into_iter().zip(&fresh) {
            self.cache.insert(k, r.clone());
        }
        Ok(fresh)
    }
}

/// One slice layout of the dataset grid: `(share, user count)` per slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub slices: Vec<(f64, usize)>,
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    schema: String,
    version: u32,
}

/// Writes one labelled record per (config, seed, slice), configs outermost.
/// Returns the number of records written.
#[allow(clippy::too_many_arguments)]
pub fn dataset_export<W: Write>(
    system: &SystemModel,
    scenario: Scenario,
    num_subchannels: usize,
    num_slots: usize,
    grid: &[DatasetConfig],
    seeds: &[u64],
    params: &FrameParams,
    out: W,
) -> Result<usize> {
    let mut out = BufWriter::new(out);
    serde_json::to_writer(
        &mut out,
        &DatasetHeader {
            schema: DATASET_SCHEMA.into(),
            version: DATASET_VERSION,
        },
    )?;
    out.write_all(b"\n")?;
    let link = LinkContext::from_system(system);
    let mut count = 0;
    for config in grid {
        let slices = crate::scheduler::build_slices(&config.slices)?;
        for &seed in seeds {
            let realization =
                sample_channel_realization(system, &slices, num_subchannels * num_slots, seed)?;
            let inputs = FrameInputs {
                scenario,
                realization: &realization,
                slices: &slices,
                num_subchannels,
                link,
                params,
            };
            let labels = OracleEstimator.estimate_frame(&inputs)?;
            for (request, label) in inputs.requests().into_iter().zip(labels) {
                serde_json::to_writer(&mut out, &DatasetRecord::new(request, label.pred_gm_bps))?;
                out.write_all(b"\n")?;
                count += 1;
            }
        }
    }
    out.flush()?;
    Ok(count)
}

/// Reads a dataset written by [`dataset_export`], checking header and records.
pub fn read_dataset<R: BufRead>(input: R) -> Result<Vec<DatasetRecord>> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::MalformedRecord("empty dataset: header missing".into()))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::MalformedRecord(format!("header: {e}")))?;
    if header.schema != DATASET_SCHEMA || header.version != DATASET_VERSION {
        return Err(Error::MalformedRecord(format!(
            "unsupported dataset {} v{}",
            header.schema, header.version
        )));
    }
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedRecord(format!("record {}: {e}", i + 1)))?;
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

/// Mean absolute percentage error, in percent.
pub fn mape(truth: &[f64], predicted: &[f64]) -> f64 {
    assert_eq!(truth.len(), predicted.len());
    if truth.is_empty() {
        return 0.0;
    }
    let sum: f64 = truth
        .iter()
        .zip(predicted)
        .map(|(t, p)| ((t - p) / t).abs())
        .sum();
    100.0 * sum / truth.len() as f64
}
