//! Joint power distribution and MCS selection on one PRB.
//!
//! With a staircase rate function, the minimal power for level `l` of user
//! `u` is `Gamma_l sigma^2 / g_u`, so the per-PRB problem is a
//! multiple-choice knapsack: pick one level per user, total power within the
//! budget, maximize the weighted rate.

use crate::error::{Error, Result};
use crate::rate_function::RateTable;

/// Largest instance accepted by [`allocate_bruteforce`].
pub const BRUTEFORCE_MAX_USERS: usize = 6;
pub const BRUTEFORCE_MAX_LEVELS: usize = 15;

#[derive(Clone, Debug)]
pub struct AllocationInstance<'a> {
    pub effective_gains: Vec<f64>,
    /// Objective coefficient per user (weight on its rate in bit/s).
    pub weights: Vec<f64>,
    pub power_budget_w: f64,
    pub noise_power_w: f64,
    pub table: &'a RateTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PowerAllocation {
    pub powers_w: Vec<f64>,
    /// 0 = unserved, otherwise the 1-based MCS level.
    pub levels: Vec<usize>,
    pub rates_bps: Vec<f64>,
    pub objective: f64,
}

impl PowerAllocation {
    pub fn zeros(num_users: usize) -> Self {
        Self {
            powers_w: vec![0.0; num_users],
            levels: vec![0; num_users],
            rates_bps: vec![0.0; num_users],
            objective: 0.0,
        }
    }

    pub fn total_power(&self) -> f64 {
        self.powers_w.iter().sum()
    }
}

impl AllocationInstance<'_> {
    pub fn num_users(&self) -> usize {
        self.effective_gains.len()
    }

    fn servable(&self, u: usize) -> bool {
        self.effective_gains[u] > 0.0
            && self.effective_gains[u].is_finite()
            && self.weights[u] > 0.0
    }

    fn cost(&self, u: usize, level: usize) -> f64 {
        if level == 0 {
            0.0
        } else {
            self.table
                .min_power_unchecked(self.effective_gains[u], level, self.noise_power_w)
        }
    }

    fn value(&self, u: usize, level: usize) -> f64 {
        self.weights[u] * self.table.rate_of_level(level)
    }

    /// Power ladder of user `u`: `ladder[l]` is the minimal power for level `l`.
    fn ladder(&self, u: usize) -> Vec<f64> {
        (0..=self.table.len()).map(|l| self.cost(u, l)).collect()
    }

    fn finish(&self, levels: Vec<usize>, powers_w: Vec<f64>) -> PowerAllocation {
        let rates_bps: Vec<f64> = levels
            .iter()
            .map(|&l| self.table.rate_of_level(l))
            .collect();
        let objective = levels
            .iter()
            .enumerate()
            .map(|(u, &l)| self.value(u, l))
            .sum();
        PowerAllocation {
            powers_w,
            levels,
            rates_bps,
            objective,
        }
    }

    fn validate(&self) {
        assert_eq!(
            self.effective_gains.len(),
            self.weights.len(),
            "one weight per user"
        );
    }
}

/// Upper concave hull of the (power, value) ladder, as a list of levels
/// starting at 0. Collinear vertices are kept, so ties break toward the
/// lower level.
fn concave_hull(costs: &[f64], values: &[f64]) -> Vec<usize> {
    let mut hull: Vec<usize> = Vec::with_capacity(costs.len());
    for l in 0..costs.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (costs[b] - costs[a]) * (values[l] - values[a])
                - (values[b] - values[a]) * (costs[l] - costs[a]);
            if cross > 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(l);
    }
    hull
}

/// Value of the largest single hull increment over all users.
///
/// Greedy on the hull is within this much of the exact optimum.
pub fn max_hull_increment(instance: &AllocationInstance<'_>) -> f64 {
    instance.validate();
    let levels = instance.table.len();
    (0..instance.num_users())
        .filter(|&u| instance.servable(u))
        .flat_map(|u| {
            let costs = instance.ladder(u);
            let values: Vec<f64> = (0..=levels).map(|l| instance.value(u, l)).collect();
            let hull = concave_hull(&costs, &values);
            hull.windows(2)
                .map(|w| values[w[1]] - values[w[0]])
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Greedy allocation on each user's concave hull, followed by a fill pass.
///
/// Hull steps are taken in decreasing (value gain / power cost) order; ties go
/// to the lower user index. When a user's next hull vertex no longer fits, its
/// hull is rebuilt over the levels still within the remaining budget. Once no
/// hull step fits, any leftover power is spent on the single level upgrade
/// with the largest value gain, repeatedly, until nothing fits.
pub fn allocate_greedy(instance: &AllocationInstance<'_>) -> PowerAllocation {
    instance.validate();
    let n = instance.num_users();
    let budget = instance.power_budget_w;
    let levels_total = instance.table.len();
    let mut levels = vec![0usize; n];
    let mut powers = vec![0.0f64; n];
    if !(budget > 0.0) {
        return instance.finish(levels, powers);
    }

    let ladders: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            if instance.servable(u) {
                instance.ladder(u)
            } else {
                Vec::new()
            }
        })
        .collect();
    let values: Vec<Vec<f64>> = (0..n)
        .map(|u| (0..=levels_total).map(|l| instance.value(u, l)).collect())
        .collect();
    let hulls: Vec<Vec<usize>> = (0..n)
        .map(|u| {
            if instance.servable(u) {
                concave_hull(&ladders[u], &values[u])
            } else {
                vec![0]
            }
        })
        .collect();
    let mut position = vec![0usize; n];
    let mut blocked: Vec<bool> = (0..n).map(|u| hulls[u].len() < 2).collect();
    let mut hulls = hulls;
    let mut spent = 0.0f64;

    let canonical_total = |powers: &[f64], u: usize, p: f64| -> f64 {
        powers
            .iter()
            .enumerate()
            .map(|(v, &x)| if v == u { p } else { x })
            .sum()
    };

    loop {
        let mut best: Option<(usize, f64)> = None;
        for u in 0..n {
            if blocked[u] {
                continue;
            }
            let mut from = hulls[u][position[u]];
            let mut to = hulls[u][position[u] + 1];
            if spent + ladders[u][to] - ladders[u][from] > budget {
                // The next vertex no longer fits: rebuild the hull from the
                // current level over the levels that still do.
                let room = budget - spent + powers[u];
                let reachable: Vec<usize> = (levels[u]..=levels_total)
                    .filter(|&l| l == levels[u] || ladders[u][l] <= room)
                    .collect();
                let costs: Vec<f64> = reachable.iter().map(|&l| ladders[u][l]).collect();
                let vals: Vec<f64> = reachable.iter().map(|&l| values[u][l]).collect();
                hulls[u] = concave_hull(&costs, &vals)
                    .into_iter()
                    .map(|i| reachable[i])
                    .collect();
                position[u] = 0;
                if hulls[u].len() < 2 {
                    blocked[u] = true;
                    continue;
                }
                from = hulls[u][0];
                to = hulls[u][1];
            }
            let dc = ladders[u][to] - ladders[u][from];
            let dv = values[u][to] - values[u][from];
            let ratio = dv / dc;
            if best.is_none_or(|(_, r)| ratio > r) {
                best = Some((u, ratio));
            }
        }
        let Some((u, _)) = best else { break };
        let to = hulls[u][position[u] + 1];
        let total = canonical_total(&powers, u, ladders[u][to]);
        if total > budget {
            blocked[u] = true;
            continue;
        }
        position[u] += 1;
        levels[u] = to;
        powers[u] = ladders[u][to];
        spent = total;
        if position[u] + 1 >= hulls[u].len() {
            blocked[u] = true;
        }
    }

    // Fill pass over the full ladders.
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for u in 0..n {
            if ladders[u].is_empty() {
                continue;
            }
            for to in levels[u] + 1..=levels_total {
                let dc = ladders[u][to] - powers[u];
                if spent + dc > budget {
                    break;
                }
                let dv = values[u][to] - values[u][levels[u]];
                if dv > 0.0 && best.is_none_or(|(_, _, g)| dv > g) {
                    best = Some((u, to, dv));
                }
            }
        }
        let Some((u, to, _)) = best else { break };
        let total = canonical_total(&powers, u, ladders[u][to]);
        if total > budget {
            break;
        }
        levels[u] = to;
        powers[u] = ladders[u][to];
        spent = total;
    }

    instance.finish(levels, powers)
}

/// Exact optimum by depth-first enumeration of level vectors with
/// budget and value-bound pruning. Test oracle.
pub fn allocate_bruteforce(instance: &AllocationInstance<'_>) -> Result<PowerAllocation> {
    instance.validate();
    let n = instance.num_users();
    if n > BRUTEFORCE_MAX_USERS || instance.table.len() > BRUTEFORCE_MAX_LEVELS {
        return Err(Error::TooLarge(format!(
            "{n} users x {} levels (limit {BRUTEFORCE_MAX_USERS} x {BRUTEFORCE_MAX_LEVELS})",
            instance.table.len()
        )));
    }
    let budget = instance.power_budget_w;
    let levels_total = instance.table.len();
    let ladders: Vec<Vec<f64>> = (0..n)
        .map(|u| {
            if instance.servable(u) {
                instance.ladder(u)
            } else {
                vec![0.0]
            }
        })
        .collect();
    let values: Vec<Vec<f64>> = (0..n)
        .map(|u| (0..=levels_total).map(|l| instance.value(u, l)).collect())
        .collect();

    struct Search<'s> {
        ladders: &'s [Vec<f64>],
        values: &'s [Vec<f64>],
        budget: f64,
        current: Vec<usize>,
        best: Vec<usize>,
        best_value: f64,
    }

    impl Search<'_> {
        fn bound(&self, from: usize, remaining: f64) -> f64 {
            (from..self.ladders.len())
                .map(|u| {
                    let top = self.ladders[u].partition_point(|&c| c <= remaining);
                    self.values[u][top.saturating_sub(1)]
                })
                .sum()
        }

        fn total_power(&self) -> f64 {
            self.current
                .iter()
                .enumerate()
                .map(|(u, &l)| self.ladders[u][l])
                .sum()
        }

        fn visit(&mut self, u: usize, spent: f64, value: f64) {
            if u == self.ladders.len() {
                if value > self.best_value && self.total_power() <= self.budget {
                    self.best_value = value;
                    self.best.clone_from(&self.current);
                }
                return;
            }
            let remaining = self.budget - spent;
            if value + self.bound(u, remaining) <= self.best_value {
                return;
            }
            for l in (0..self.ladders[u].len()).rev() {
                let c = self.ladders[u][l];
                if c > remaining {
                    continue;
                }
                self.current[u] = l;
                self.visit(u + 1, spent + c, value + self.values[u][l]);
            }
            self.current[u] = 0;
        }
    }

    let mut search = Search {
        ladders: &ladders,
        values: &values,
        budget,
        current: vec![0; n],
        best: vec![0; n],
        best_value: 0.0,
    };
    if budget > 0.0 {
        search.visit(0, 0.0, 0.0);
    }
    let levels = search.best;
    let powers = levels
        .iter()
        .enumerate()
        .map(|(u, &l)| ladders[u][l])
        .collect();
    Ok(instance.finish(levels, powers))
}
