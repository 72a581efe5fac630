//! Frame schedulers: the static-share proportional-fair benchmark and the
//! sharing scheduler driven by per-slice Lagrangian weights.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel_model::{ChannelRealization, SystemModel};
use crate::error::{Error, Result};
use crate::rate_function::RateTable;
use crate::user_selection::{
    select_k, select_offline_reference, SelectionOutcome, SelectionProblem,
};

const SHARE_TOLERANCE: f64 = 1e-9;

/// Relative spread of the slice gains below which slices count as equalized.
pub const SPREAD_THRESHOLD: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceConfig {
    pub slice_id: usize,
    pub share: f64,
    pub users: Vec<usize>,
}

/// Checks shares and user ownership. Users must be exactly `0..U` across slices.
pub fn validate_slices(slices: &[SliceConfig]) -> Result<usize> {
    if slices.is_empty() {
        return Err(Error::InvalidConfig("no slices".into()));
    }
    let mut total = 0.0;
    for (q, s) in slices.iter().enumerate() {
        if s.slice_id != q {
            return Err(Error::InvalidConfig(format!(
                "slice {q} carries id {}",
                s.slice_id
            )));
        }
        if !(s.share > 0.0 && s.share <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "slice {q} share {} outside (0, 1]",
                s.share
            )));
        }
        if s.users.is_empty() {
            return Err(Error::InvalidConfig(format!("slice {q} has no users")));
        }
        total += s.share;
    }
    if (total - 1.0).abs() > SHARE_TOLERANCE {
        return Err(Error::InvalidConfig(format!("shares sum to {total}")));
    }
    let num_users: usize = slices.iter().map(|s| s.users.len()).sum();
    let mut seen = vec![false; num_users];
    for &u in slices.iter().flat_map(|s| &s.users) {
        if u >= num_users || std::mem::replace(&mut seen[u], true) {
            return Err(Error::InvalidConfig(format!(
                "user {u} is out of range or in two slices"
            )));
        }
    }
    Ok(num_users)
}

/// Builds slices from `(share, user count)` pairs, numbering users consecutively.
pub fn build_slices(spec: &[(f64, usize)]) -> Result<Vec<SliceConfig>> {
    let mut next = 0;
    let slices: Vec<SliceConfig> = spec
        .iter()
        .enumerate()
        .map(|(q, &(share, count))| {
            let users = (next..next + count).collect();
            next += count;
            SliceConfig {
                slice_id: q,
                share,
                users,
            }
        })
        .collect();
    validate_slices(&slices)?;
    Ok(slices)
}

pub fn equal_share_slices(counts: &[usize]) -> Result<Vec<SliceConfig>> {
    let share = 1.0 / counts.len().max(1) as f64;
    let spec: Vec<(f64, usize)> = counts.iter().map(|&c| (share, c)).collect();
    let mut slices = build_slices(&spec);
    if let Ok(s) = slices.as_mut() {
        // absorb rounding so the shares sum to one exactly
        let head: f64 = s[..s.len() - 1].iter().map(|x| x.share).sum();
        s.last_mut().unwrap().share = 1.0 - head;
    }
    slices
}

/// Largest-remainder split of `num_subchannels` by `shares`; leftover units go
/// to the largest fractional parts, ties to the lower slice index.
pub fn partition_subchannels(shares: &[f64], num_subchannels: usize) -> Vec<usize> {
    let total: f64 = shares.iter().sum();
    let quotas: Vec<f64> = shares
        .iter()
        .map(|s| s / total * num_subchannels as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &q in order.iter().take(num_subchannels.saturating_sub(assigned)) {
        counts[q] += 1;
    }
    counts
}

/// Running average over PRBs: `R_n = (1 - 1/n) R_{n-1} + r_n / n`, written
/// in increment form so a constant rate is an exact fixed point.
pub fn update_avg_rate(prev: f64, rate_now: f64, n: usize) -> f64 {
    debug_assert!(n >= 1);
    if n == 1 {
        rate_now
    } else {
        prev + (rate_now - prev) / n as f64
    }
}

/// Projected step on the slice weights. `ratios[q]` is the current gain of
/// slice `q` against its target. Returns the new weights and whether every
/// entry clamped to zero, in which case the weights restart uniform.
pub fn update_weights(beta: &[f64], ratios: &[f64], rho: f64) -> (Vec<f64>, bool) {
    let q = beta.len() as f64;
    let mean = ratios.iter().sum::<f64>() / q;
    let raw: Vec<f64> = beta
        .iter()
        .zip(ratios)
        .map(|(b, r)| (b - rho * (r - mean)).max(0.0))
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        (raw.iter().map(|x| x / total).collect(), false)
    } else {
        (vec![1.0 / q; beta.len()], true)
    }
}

/// Geometric mean of accumulated throughput `n * R_u`, evaluated in the log domain.
pub fn compute_geomean(avg_rates: &[f64], n: usize) -> f64 {
    let n = n as f64;
    if let [single] = avg_rates {
        return n * single;
    }
    let mean_log = avg_rates.iter().map(|r| (n * r).ln()).sum::<f64>() / avg_rates.len() as f64;
    mean_log.exp()
}

/// `(max - min) / mean` of the slice gains.
pub fn relative_spread(gains: &[f64]) -> f64 {
    let max = gains.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = gains.iter().copied().fold(f64::INFINITY, f64::min);
    let mean = gains.iter().sum::<f64>() / gains.len() as f64;
    if mean > 0.0 {
        (max - min) / mean
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SelectionStrategy {
    /// Two-pass Select(K); `k` spans all users on the PRB.
    Online { k: usize },
    /// Greedy add + swap reference.
    #[default]
    OfflineReference,
}

impl SelectionStrategy {
    fn run(&self, problem: &SelectionProblem<'_>) -> SelectionOutcome {
        match *self {
            SelectionStrategy::Online { k } => {
                select_k(problem, k.clamp(1, problem.candidates.len().max(1)))
            }
            SelectionStrategy::OfflineReference => select_offline_reference(problem),
        }
    }
}

/// Link budget and rate table shared by every PRB of a frame.
#[derive(Clone, Copy, Debug)]
pub struct LinkContext<'a> {
    pub table: &'a RateTable,
    pub power_budget_w: f64,
    pub noise_power_w: f64,
}

impl<'a> LinkContext<'a> {
    pub fn from_system(system: &'a SystemModel) -> Self {
        Self {
            table: &system.table,
            power_budget_w: system.power_budget_w(),
            noise_power_w: system.noise_power_w,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameParams {
    /// Weight step size.
    pub rho: f64,
    /// Initial average rate, bit/s.
    pub epsilon: f64,
    /// Weights are updated every `cadence` PRBs.
    pub cadence: usize,
    pub strategy: SelectionStrategy,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            rho: 0.01,
            epsilon: 1e-3,
            cadence: 1,
            strategy: SelectionStrategy::OfflineReference,
        }
    }
}

impl FrameParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidConfig("rho must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig("epsilon must be positive".into()));
        }
        if self.cadence == 0 {
            return Err(Error::InvalidConfig("cadence must be at least 1".into()));
        }
        if let SelectionStrategy::Online { k: 0 } = self.strategy {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServedUser {
    pub user: usize,
    pub slice: usize,
    pub power_w: f64,
    pub level: usize,
    pub rate_bps: f64,
}

/// One PRB of a frame, as written to traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrbDecision {
    /// 1-based PRB index.
    pub prb: usize,
    /// Owning slice on the benchmark path; absent when shared.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub owner: Option<usize>,
    pub served: Vec<ServedUser>,
    pub slice_geomeans: Vec<f64>,
    pub weights: Vec<f64>,
    pub rounds: usize,
}

/// Per-user running averages, slice weights and geomeans of a sharing frame.
#[derive(Clone, Debug, PartialEq)]
pub struct SchedulerState {
    pub prb_index: usize,
    pub avg_rates: Vec<f64>,
    pub beta: Vec<f64>,
    pub geomeans: Vec<f64>,
    pub targets: Vec<f64>,
    pub rho: f64,
    pub epsilon: f64,
    pub anomalies: usize,
    slice_of: Vec<usize>,
    slice_users: Vec<Vec<usize>>,
}

impl SchedulerState {
    pub fn new(slices: &[SliceConfig], targets: &[f64], rho: f64, epsilon: f64) -> Result<Self> {
        let num_users = validate_slices(slices)?;
        if targets.len() != slices.len() || targets.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument(
                "one positive target per slice is required".into(),
            ));
        }
        let mut slice_of = vec![0; num_users];
        for s in slices {
            for &u in &s.users {
                slice_of[u] = s.slice_id;
            }
        }
        let q = slices.len();
        Ok(Self {
            prb_index: 0,
            avg_rates: vec![epsilon; num_users],
            beta: vec![1.0 / q as f64; q],
            geomeans: vec![0.0; q],
            targets: targets.to_vec(),
            rho,
            epsilon,
            anomalies: 0,
            slice_of,
            slice_users: slices.iter().map(|s| s.users.clone()).collect(),
        })
    }

    pub fn slice_of(&self, user: usize) -> usize {
        self.slice_of[user]
    }

    /// Objective weights `beta_q / (|U_q| R_u)` for the next PRB.
    pub fn prb_weights(&self) -> Vec<f64> {
        self.avg_rates
            .iter()
            .enumerate()
            .map(|(u, &r)| {
                let q = self.slice_of[u];
                self.beta[q] / (self.slice_users[q].len() as f64 * r.max(self.epsilon))
            })
            .collect()
    }

    /// Current gain of each slice against its target.
    pub fn gains(&self) -> Vec<f64> {
        self.geomeans
            .iter()
            .zip(&self.targets)
            .map(|(g, t)| g / t)
            .collect()
    }

    /// Folds one PRB's per-user rates into the averages and geomeans, then
    /// steps the weights when `update_weights_now` is set.
    pub fn advance(&mut self, rates: &[f64], update_weights_now: bool) {
        self.prb_index += 1;
        let n = self.prb_index;
        for (r, &now) in self.avg_rates.iter_mut().zip(rates) {
            *r = update_avg_rate(*r, now, n);
        }
        for (q, users) in self.slice_users.iter().enumerate() {
            let floored: Vec<f64> = users
                .iter()
                .map(|&u| self.avg_rates[u].max(self.epsilon))
                .collect();
            self.geomeans[q] = compute_geomean(&floored, n);
        }
        if update_weights_now {
            let (beta, anomaly) = update_weights(&self.beta, &self.gains(), self.rho);
            if anomaly {
                log::warn!("all slice weights clamped to zero at PRB {n}; reset to uniform");
                self.anomalies += 1;
            }
            self.beta = beta;
        }
    }
}

fn served_users(outcome: &SelectionOutcome, slice_of: impl Fn(usize) -> usize) -> Vec<ServedUser> {
    outcome
        .user_set
        .iter()
        .enumerate()
        .filter(|&(i, _)| outcome.allocation.rates_bps[i] > 0.0)
        .map(|(i, &u)| ServedUser {
            user: u,
            slice: slice_of(u),
            power_w: outcome.allocation.powers_w[i],
            level: outcome.allocation.levels[i],
            rate_bps: outcome.allocation.rates_bps[i],
        })
        .collect()
}

fn check_frame(realization: &ChannelRealization, slices: &[SliceConfig]) -> Result<usize> {
    let num_users = validate_slices(slices)?;
    if num_users != realization.num_users() {
        return Err(Error::InvalidArgument(format!(
            "slices cover {num_users} users, realization has {}",
            realization.num_users()
        )));
    }
    Ok(num_users)
}

/// Static-share benchmark outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    /// End-of-frame geomean throughput per slice, bit/s summed over PRBs.
    pub targets: Vec<f64>,
    pub per_user_throughput: Vec<f64>,
    pub prbs_per_slice: Vec<usize>,
}

/// Runs the static-share benchmark. Each of the `N / C` slots splits its `C`
/// sub-channels into contiguous per-slice blocks; every slice runs
/// proportional fair on its own blocks with its own users.
pub fn benchmark_frame(
    realization: &ChannelRealization,
    slices: &[SliceConfig],
    num_subchannels: usize,
    link: LinkContext<'_>,
    params: &FrameParams,
    trace: Option<&mut dyn FnMut(&PrbDecision)>,
) -> Result<BenchmarkResult> {
    let num_users = check_frame(realization, slices)?;
    params.validate()?;
    let n_total = realization.num_prbs();
    if num_subchannels == 0 || !n_total.is_multiple_of(num_subchannels) {
        return Err(Error::InvalidArgument(format!(
            "{n_total} PRBs is not a whole number of slots of {num_subchannels} sub-channels"
        )));
    }
    let shares: Vec<f64> = slices.iter().map(|s| s.share).collect();
    let counts = partition_subchannels(&shares, num_subchannels);
    let mut owner = Vec::with_capacity(num_subchannels);
    for (q, &c) in counts.iter().enumerate() {
        owner.extend(std::iter::repeat_n(q, c));
    }
    let mut slice_of = vec![0; num_users];
    for s in slices {
        for &u in &s.users {
            slice_of[u] = s.slice_id;
        }
    }

    let eps = params.epsilon;
    let mut avg = vec![eps; num_users];
    let mut seen = vec![0usize; slices.len()];
    let mut totals = vec![0.0; num_users];
    let mut weights = vec![0.0; num_users];
    let mut trace = trace;
    for n in 0..n_total {
        let q = owner[n % num_subchannels];
        let users = &slices[q].users;
        let size = users.len() as f64;
        for &u in users {
            weights[u] = 1.0 / (size * avg[u].max(eps));
        }
        let problem = SelectionProblem {
            channel: realization.channel(n),
            candidates: users,
            weights: &weights,
            power_budget_w: link.power_budget_w,
            noise_power_w: link.noise_power_w,
            table: link.table,
        };
        let outcome = params.strategy.run(&problem);
        let rates = outcome.rates_by_user(num_users);
        seen[q] += 1;
        for &u in users {
            avg[u] = update_avg_rate(avg[u], rates[u], seen[q]);
            totals[u] += rates[u];
        }
        if let Some(cb) = trace.as_deref_mut() {
            let geomeans = slices
                .iter()
                .map(|s| slice_geomean(&totals, &s.users, eps))
                .collect();
            cb(&PrbDecision {
                prb: n + 1,
                owner: Some(q),
                served: served_users(&outcome, |u| slice_of[u]),
                slice_geomeans: geomeans,
                weights: users.iter().map(|&u| weights[u]).collect(),
                rounds: outcome.rounds,
            });
        }
    }
    let targets = slices
        .iter()
        .map(|s| slice_geomean(&totals, &s.users, eps))
        .collect();
    Ok(BenchmarkResult {
        targets,
        per_user_throughput: totals,
        prbs_per_slice: seen,
    })
}

/// Geomean of summed throughput, with each user floored at `floor`.
fn slice_geomean(totals: &[f64], users: &[usize], floor: f64) -> f64 {
    let floored: Vec<f64> = users.iter().map(|&u| totals[u].max(floor)).collect();
    compute_geomean(&floored, 1)
}

/// Sharing-frame outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameResult {
    pub geomeans: Vec<f64>,
    pub targets: Vec<f64>,
    pub gains: Vec<f64>,
    /// `gain_trace[n - 1][q]` is the gain of slice `q` after PRB `n`.
    pub gain_trace: Vec<Vec<f64>>,
    pub per_user_throughput: Vec<f64>,
    pub final_weights: Vec<f64>,
    pub weight_anomalies: usize,
    pub total_rounds: usize,
    #[serde(skip)]
    pub wall_time_s: f64,
    #[serde(skip)]
    pub max_prb_time_s: f64,
}

impl FrameResult {
    pub fn spread(&self) -> f64 {
        relative_spread(&self.gains)
    }

    /// First PRB at which the gain spread drops below the threshold.
    pub fn convergence_prb(&self) -> Option<usize> {
        self.gain_trace
            .iter()
            .position(|g| relative_spread(g) < SPREAD_THRESHOLD)
            .map(|i| i + 1)
    }

    /// First PRB after which the gain spread stays below the threshold.
    pub fn settled_prb(&self) -> Option<usize> {
        let mut first = None;
        for (i, g) in self.gain_trace.iter().enumerate() {
            if relative_spread(g) < SPREAD_THRESHOLD {
                first.get_or_insert(i + 1);
            } else {
                first = None;
            }
        }
        first
    }

    /// First PRB at which every slice has matched its target.
    pub fn break_even_prb(&self) -> Option<usize> {
        self.gain_trace
            .iter()
            .position(|g| g.iter().all(|&x| x >= 1.0))
            .map(|i| i + 1)
    }

    /// Fraction of the frame left over once every slice matched its target.
    pub fn bandwidth_savings(&self) -> f64 {
        let n = self.gain_trace.len() as f64;
        self.break_even_prb().map_or(0.0, |p| (n - p as f64) / n)
    }

    pub fn mean_prb_time_s(&self) -> f64 {
        self.wall_time_s / self.gain_trace.len().max(1) as f64
    }
}

/// Runs the weighted sharing scheduler over every PRB of the realization.
pub fn fgss_frame(
    realization: &ChannelRealization,
    slices: &[SliceConfig],
    targets: &[f64],
    link: LinkContext<'_>,
    params: &FrameParams,
    trace: Option<&mut dyn FnMut(&PrbDecision)>,
) -> Result<FrameResult> {
    let num_users = check_frame(realization, slices)?;
    params.validate()?;
    let mut state = SchedulerState::new(slices, targets, params.rho, params.epsilon)?;
    let candidates: Vec<usize> = (0..num_users).collect();
    let mut totals = vec![0.0; num_users];
    let mut gain_trace = Vec::with_capacity(realization.num_prbs());
    let mut total_rounds = 0;
    let mut max_prb_time_s: f64 = 0.0;
    let mut trace = trace;
    let start = Instant::now();
    for n in 0..realization.num_prbs() {
        let prb_start = Instant::now();
        let weights = state.prb_weights();
        let problem = SelectionProblem {
            channel: realization.channel(n),
            candidates: &candidates,
            weights: &weights,
            power_budget_w: link.power_budget_w,
            noise_power_w: link.noise_power_w,
            table: link.table,
        };
        let outcome = params.strategy.run(&problem);
        let rates = outcome.rates_by_user(num_users);
        for (t, r) in totals.iter_mut().zip(&rates) {
            *t += r;
        }
        let beta_used = state.beta.clone();
        state.advance(&rates, (n + 1) % params.cadence == 0);
        max_prb_time_s = max_prb_time_s.max(prb_start.elapsed().as_secs_f64());
        total_rounds += outcome.rounds;
        gain_trace.push(state.gains());
        if let Some(cb) = trace.as_deref_mut() {
            cb(&PrbDecision {
                prb: n + 1,
                owner: None,
                served: served_users(&outcome, |u| state.slice_of(u)),
                slice_geomeans: state.geomeans.clone(),
                weights: beta_used,
                rounds: outcome.rounds,
            });
        }
    }
    Ok(FrameResult {
        gains: state.gains(),
        geomeans: state.geomeans.clone(),
        targets: targets.to_vec(),
        gain_trace,
        per_user_throughput: totals,
        final_weights: state.beta.clone(),
        weight_anomalies: state.anomalies,
        total_rounds,
        wall_time_s: start.elapsed().as_secs_f64(),
        max_prb_time_s,
    })
}
