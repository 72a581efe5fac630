//! Per-PRB user selection: the two-pass Select(K) heuristic and a greedy
//! offline reference.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::power_allocation::{allocate_greedy, AllocationInstance, PowerAllocation};
use crate::precoding::{gather_rows, zf_precode, PrecodeResult};
use crate::rate_function::RateTable;

/// Inputs shared by every candidate evaluation on one PRB.
#[derive(Clone, Copy, Debug)]
pub struct SelectionProblem<'a> {
    /// `U x M` channel of the PRB; rows are indexed by global user id.
    pub channel: &'a DMatrix<Complex64>,
    /// Users eligible on this PRB.
    pub candidates: &'a [usize],
    /// Objective coefficient per global user id.
    pub weights: &'a [f64],
    pub power_budget_w: f64,
    pub noise_power_w: f64,
    pub table: &'a RateTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionOutcome {
    /// Sorted global user ids; parallel to the precoder columns and the allocation vectors.
    pub user_set: Vec<usize>,
    pub precode: PrecodeResult,
    pub allocation: PowerAllocation,
    pub weighted_sum_rate: f64,
    /// Number of precode + allocate rounds spent on this PRB.
    pub rounds: usize,
}

impl SelectionOutcome {
    pub fn empty(num_antennas: usize, rounds: usize) -> Self {
        Self {
            user_set: Vec::new(),
            precode: PrecodeResult::empty(num_antennas),
            allocation: PowerAllocation::zeros(0),
            weighted_sum_rate: 0.0,
            rounds,
        }
    }

    /// Users that actually receive a non-zero rate, with their rate.
    pub fn served(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.user_set
            .iter()
            .zip(&self.allocation.rates_bps)
            .filter(|(_, &r)| r > 0.0)
            .map(|(&u, &r)| (u, r))
    }

    /// Rate per global user id (zero for unselected users).
    pub fn rates_by_user(&self, num_users: usize) -> Vec<f64> {
        let mut rates = vec![0.0; num_users];
        for (u, r) in self.served() {
            rates[u] = r;
        }
        rates
    }
}

impl<'a> SelectionProblem<'a> {
    fn channel_energy(&self, u: usize) -> f64 {
        self.channel.row(u).norm_squared()
    }

    fn priority(&self, u: usize) -> f64 {
        self.channel_energy(u) * self.weights[u]
    }

    /// Precodes and allocates power on an exact user set (no repair).
    pub fn evaluate(&self, users: &[usize]) -> Result<SelectionOutcome> {
        let mut set = users.to_vec();
        set.sort_unstable();
        let rows = gather_rows(self.channel, &set);
        let precode = zf_precode(&rows, &set)?;
        let instance = AllocationInstance {
            effective_gains: precode.effective_gains.clone(),
            weights: set.iter().map(|&u| self.weights[u]).collect(),
            power_budget_w: self.power_budget_w,
            noise_power_w: self.noise_power_w,
            table: self.table,
        };
        let allocation = allocate_greedy(&instance);
        Ok(SelectionOutcome {
            weighted_sum_rate: allocation.objective,
            user_set: set,
            precode,
            allocation,
            rounds: 1,
        })
    }

    /// Evaluates `users`, dropping the lowest `||g||^2 * weight` user until the
    /// set is full rank. Sets larger than `M` are first cut to the `M` users
    /// of highest priority.
    pub fn evaluate_with_repair(&self, users: &[usize]) -> SelectionOutcome {
        let m = self.channel.ncols();
        let mut set = users.to_vec();
        // highest priority first; ties go to the lower user id
        set.sort_by(|&a, &b| {
            self.priority(b)
                .total_cmp(&self.priority(a))
                .then(a.cmp(&b))
        });
        set.truncate(m);
        while !set.is_empty() {
            match self.evaluate(&set) {
                Ok(outcome) => return outcome,
                Err(Error::RankDeficient { .. }) => {
                    set.pop();
                }
                Err(e) => unreachable!("evaluation only fails on rank: {e}"),
            }
        }
        SelectionOutcome::empty(m, 1)
    }
}

/// Select(K): evaluate all candidates, keep the `k` with the highest
/// strictly positive weighted rate, evaluate again. Always two rounds.
pub fn select_k(problem: &SelectionProblem<'_>, k: usize) -> SelectionOutcome {
    let first = problem.evaluate_with_repair(problem.candidates);
    let mut ranked: Vec<(usize, f64)> = first
        .user_set
        .iter()
        .zip(&first.allocation.rates_bps)
        .map(|(&u, &r)| (u, problem.weights[u] * r))
        .filter(|&(_, wr)| wr > 0.0)
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    let keep: Vec<usize> = ranked.into_iter().map(|(u, _)| u).collect();
    let mut second = if keep.is_empty() {
        SelectionOutcome::empty(problem.channel.ncols(), 1)
    } else {
        problem.evaluate_with_repair(&keep)
    };
    second.rounds += first.rounds;
    second
}

/// Offline reference selection: greedy forward addition, then single-swap
/// local search, each move accepted only on strict improvement of the
/// weighted sum-rate. Ties between candidates go to the lower user id.
pub fn select_offline_reference(problem: &SelectionProblem<'_>) -> SelectionOutcome {
    let m = problem.channel.ncols();
    let mut rounds = 0usize;
    let mut score = |set: &[usize]| -> Option<SelectionOutcome> {
        rounds += 1;
        problem.evaluate(set).ok()
    };
    let mut candidates = problem.candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let mut current: Option<SelectionOutcome> = None;
    let mut set: Vec<usize> = Vec::new();

    let improves = |new: f64, old: f64| new > old * (1.0 + 1e-12) && new > 0.0;

    while set.len() < m {
        let base = current.as_ref().map_or(0.0, |c| c.weighted_sum_rate);
        let mut best: Option<SelectionOutcome> = None;
        for &u in candidates.iter().filter(|u| !set.contains(u)) {
            let mut trial = set.clone();
            trial.push(u);
            if let Some(outcome) = score(&trial) {
                if best
                    .as_ref()
                    .is_none_or(|b| outcome.weighted_sum_rate > b.weighted_sum_rate)
                {
                    best = Some(outcome);
                }
            }
        }
        match best {
            Some(b) if improves(b.weighted_sum_rate, base) => {
                set = b.user_set.clone();
                current = Some(b);
            }
            _ => break,
        }
    }

    if let Some(mut cur) = current.take() {
        loop {
            let mut best: Option<SelectionOutcome> = None;
            for &out in &set {
                for &inc in candidates.iter().filter(|u| !set.contains(u)) {
                    let trial: Vec<usize> = set
                        .iter()
                        .map(|&u| if u == out { inc } else { u })
                        .collect();
                    if let Some(outcome) = score(&trial) {
                        if best
                            .as_ref()
                            .is_none_or(|b| outcome.weighted_sum_rate > b.weighted_sum_rate)
                        {
                            best = Some(outcome);
                        }
                    }
                }
            }
            match best {
                Some(b) if improves(b.weighted_sum_rate, cur.weighted_sum_rate) => {
                    set = b.user_set.clone();
                    cur = b;
                }
                _ => break,
            }
        }
        current = Some(cur);
    }

    let mut outcome = current.unwrap_or_else(|| SelectionOutcome::empty(m, 0));
    outcome.rounds = rounds;
    outcome
}
