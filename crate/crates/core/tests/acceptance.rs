//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use fgss::channel_model::sample_channel_realization;
use fgss::harness::{
    run_campaign, tune_k, Campaign, EstimatorChoice, ExperimentConfig, NoiseModel, RunOptions,
};
use fgss::power_allocation::{
    allocate_bruteforce, allocate_greedy, max_hull_increment, AllocationInstance,
};
use fgss::precoding::{gather_rows, zf_precode};
use fgss::rate_function::{db_to_linear, RateTable};
use fgss::scheduler::{
    build_slices, compute_geomean, fgss_frame, update_avg_rate, update_weights, FrameParams,
    LinkContext, SelectionStrategy, SPREAD_THRESHOLD,
};
use fgss::user_selection::{select_k, SelectionProblem};

const THRESHOLDS_DB: [f64; 15] = [
    -6.82, -3.44, -0.53, 3.79, 5.80, 8.08, 9.76, 11.72, 13.49, 15.87, 17.73, 19.50, 21.30, 23.51,
    25.15,
];
const EFFICIENCIES: [f64; 15] = [
    0.15, 0.38, 0.88, 1.48, 1.91, 2.41, 2.73, 3.32, 3.90, 4.52, 5.12, 5.55, 6.23, 6.91, 7.41,
];
const PRB_BANDWIDTH_HZ: f64 = 180e3;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/desk")
        .join(name);
    ExperimentConfig::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn campaign(cfg: &ExperimentConfig) -> Campaign {
    let c = run_campaign(cfg, &RunOptions::default()).expect("campaign runs");
    assert!(
        c.failures.is_empty(),
        "{}: failed seeds {:?}",
        cfg.name,
        c.failures
    );
    c
}

fn complex_gaussian(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn criterion_1() -> Verdict {
    let table = RateTable::default();
    let mut bad = Vec::new();
    if table.len() != 15
        || table.thresholds_db() != THRESHOLDS_DB
        || table.efficiencies() != EFFICIENCIES
    {
        bad.push("table entries differ".to_string());
    }
    if table.prb_bandwidth_hz() != PRB_BANDWIDTH_HZ {
        bad.push("PRB bandwidth".into());
    }
    for (l, (&t, &e)) in THRESHOLDS_DB.iter().zip(&EFFICIENCIES).enumerate() {
        let above = table.rate(db_to_linear(t + 1e-9));
        let below = table.rate(db_to_linear(t - 1e-9));
        let expect_below = if l == 0 {
            0.0
        } else {
            PRB_BANDWIDTH_HZ * EFFICIENCIES[l - 1]
        };
        if above != PRB_BANDWIDTH_HZ * e || below != expect_below {
            bad.push(format!("level {}", l + 1));
        }
    }
    for db in [-6.83, -7.0, -20.0, -100.0] {
        if table.rate(db_to_linear(db)) != 0.0 {
            bad.push(format!("{db} dB not zero"));
        }
    }
    verdict(
        bad.is_empty(),
        format!("15 levels, 30 threshold probes, 4 sub-threshold probes; errors {bad:?}"),
    )
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_res, mut worst_norm, mut worst_gain) = (0.0f64, 0.0f64, 0.0f64);
    let mut tested = 0;
    while tested < 1000 {
        let m = rng.gen_range(1..=32);
        let u = rng.gen_range(1..=m);
        let h = DMatrix::from_fn(u, m, |_, _| complex_gaussian(&mut rng));
        let users: Vec<usize> = (0..u).collect();
        let Ok(p) = zf_precode(&gather_rows(&h, &users), &users) else {
            continue;
        };
        tested += 1;
        let w = &p.normalized_precoders;
        for c in 0..u {
            worst_norm = worst_norm.max((w.column(c).norm() - 1.0).abs());
            for v in 0..u {
                if v != c {
                    let leak: Complex64 = h
                        .row(v)
                        .iter()
                        .zip(w.column(c).iter())
                        .map(|(g, x)| g * x)
                        .sum();
                    worst_res = worst_res.max(leak.norm() / h.row(v).norm());
                }
            }
        }
        // H H^H inverted by LU: gain_u = 1 / [(H H^H)^-1]_uu
        let gram = &h * h.adjoint();
        let inv = gram.lu().try_inverse().expect("full rank Gram matrix");
        for c in 0..u {
            let oracle = 1.0 / inv[(c, c)].re;
            worst_gain = worst_gain.max((p.effective_gains[c] - oracle).abs() / oracle);
        }
    }
    verdict(
        worst_res <= 1e-9 && worst_norm <= 1e-12 && worst_gain <= 1e-8,
        format!(
            "{tested} instances: max residual/|g| {worst_res:.2e} (<= 1e-9), max |norm-1| {worst_norm:.2e} (<= 1e-12), max gain rel err {worst_gain:.2e} (<= 1e-8)"
        ),
    )
}

fn criterion_3() -> Verdict {
    let table = RateTable::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut violations = 0;
    let mut ratio_sum = 0.0;
    let trials = 1000;
    for _ in 0..trials {
        let u = rng.gen_range(1..=5);
        let instance = AllocationInstance {
            effective_gains: (0..u)
                .map(|_| 10f64.powf(rng.gen_range(-1.0..3.5)))
                .collect(),
            weights: (0..u).map(|_| rng.gen_range(0.05..1.0)).collect(),
            power_budget_w: 1.0,
            noise_power_w: 1.0,
            table: &table,
        };
        let greedy = allocate_greedy(&instance).objective;
        let exact = allocate_bruteforce(&instance)
            .expect("small instance")
            .objective;
        if greedy < exact - max_hull_increment(&instance) - 1e-9 * exact {
            violations += 1;
        }
        ratio_sum += if exact > 0.0 { greedy / exact } else { 1.0 };
    }
    let mean_ratio = ratio_sum / trials as f64;
    verdict(
        violations == 0 && mean_ratio >= 0.95,
        format!("{trials} instances, L = 15: bound violations {violations}, mean greedy/optimum {mean_ratio:.4} (>= 0.95)"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_tel = 0.0f64;
    for _ in 0..100 {
        let rates: Vec<f64> = (0..400)
            .map(|_| {
                if rng.gen_bool(0.3) {
                    0.0
                } else {
                    rng.gen_range(0.0..1.4e6)
                }
            })
            .collect();
        let mut r = 1e-3;
        for (i, &x) in rates.iter().enumerate() {
            r = update_avg_rate(r, x, i + 1);
        }
        let mean = rates.iter().sum::<f64>() / 400.0;
        if mean > 0.0 {
            worst_tel = worst_tel.max((r - mean).abs() / mean);
        }
    }

    let cfg = config("b.toml");
    let system = cfg.system().expect("system");
    let slices = cfg.slice_configs().expect("slices");
    let realization =
        sample_channel_realization(&system, &slices, cfg.num_prbs(), 1).expect("realization");
    let link = LinkContext::from_system(&system);
    let targets = [3.0e7, 8.0e7];
    let mut worst_simplex = 0.0f64;
    let mut negative = false;
    let mut cb = |d: &fgss::scheduler::PrbDecision| {
        worst_simplex = worst_simplex.max((d.weights.iter().sum::<f64>() - 1.0).abs());
        negative |= d.weights.iter().any(|&b| b < 0.0);
    };
    let frame = fgss_frame(
        &realization,
        &slices,
        &targets,
        link,
        &cfg.frame_params(),
        Some(&mut cb),
    )
    .expect("frame");
    worst_simplex = worst_simplex.max((frame.final_weights.iter().sum::<f64>() - 1.0).abs());
    let mut worst_gm = 0.0f64;
    for (q, s) in slices.iter().enumerate() {
        let totals: Vec<f64> = s
            .users
            .iter()
            .map(|&u| frame.per_user_throughput[u] / 400.0)
            .collect();
        let direct = compute_geomean(&totals, 400);
        worst_gm = worst_gm.max((frame.geomeans[q] - direct).abs() / direct);
    }

    let cases: [(&[f64], &[f64], f64, &[f64]); 4] = [
        (&[0.5, 0.5], &[1.5, 0.5], 0.125, &[0.4375, 0.5625]),
        (
            &[0.25, 0.25, 0.5],
            &[1.0, 2.0, 3.0],
            0.125,
            &[0.375, 0.25, 0.375],
        ),
        (&[0.75, 0.25], &[0.5, 2.5], 0.5, &[1.0, 0.0]),
        (
            &[0.5, 0.25, 0.25],
            &[0.0, 0.0, 6.0],
            0.125,
            &[0.6, 0.4, 0.0],
        ),
    ];
    let hand_ok = cases.iter().all(|(b, r, rho, want)| {
        let (got, reset) = update_weights(b, r, *rho);
        !reset && got.as_slice() == *want
    });
    verdict(
        worst_tel <= 1e-6 && worst_gm <= 1e-6 && worst_simplex <= 1e-12 && !negative && hand_ok,
        format!(
            "telescoping rel err {worst_tel:.2e} (synthetic), {worst_gm:.2e} (frame); simplex drift {worst_simplex:.2e}, negative weights {negative}; hand cases exact {hand_ok}"
        ),
    )
}

fn criteria_5_6(runs: &[(&str, bool, &Campaign)]) -> (Verdict, Verdict) {
    let mut ok5 = true;
    let mut ok6 = true;
    let mut d5 = Vec::new();
    let mut d6 = Vec::new();
    for &(label, non_identical, c) in runs {
        let s = &c.stats;
        let half_ok = !non_identical || s.converged_by_half_rate >= 1.0;
        ok5 &= s.spread_ok_rate >= 0.9 && half_ok;
        let conv = s.convergence_prb.as_ref().map_or(f64::NAN, |p| p.p90);
        d5.push(format!(
            "{label}: spread<={:.0}% {}/{}, by N/2 {}/{} (p90 PRB {conv:.0})",
            SPREAD_THRESHOLD * 100.0,
            (s.spread_ok_rate * s.seeds as f64).round(),
            s.seeds,
            (s.converged_by_half_rate * s.seeds as f64).round(),
            s.seeds
        ));
        ok6 &= s.isolation_rate >= 0.95;
        let mean = s.mean_gain_pct.as_ref().map_or(f64::NAN, |p| p.mean);
        d6.push(format!(
            "{label}: isolated {:.0}% mean gain {mean:.1}%",
            s.isolation_rate * 100.0
        ));
    }
    let gain = |label: &str| {
        runs.iter()
            .find(|r| r.0 == label)
            .and_then(|r| r.2.stats.mean_gain_pct.as_ref())
            .map_or(f64::NAN, |p| p.mean)
    };
    ok6 &= gain("Q4-identical") > 0.0 && gain("Q4-identical") > gain("Q2-identical");
    (verdict(ok5, d5.join("; ")), verdict(ok6, d6.join("; ")))
}

fn criterion_7() -> Verdict {
    let cfg = config("tune-k.toml");
    let report = tune_k(&cfg, &cfg.k_grid, true).expect("K sweep");
    let best = report.best();
    let worst = report.worst();
    let reference = report.reference.as_ref().expect("reference row");
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("K={}:{:.3}", r.k.unwrap(), r.mean_gain))
        .collect();
    verdict(
        best.mean_gain >= 0.9 * reference.mean_gain && worst.mean_gain <= 0.9 * best.mean_gain,
        format!(
            "mean xi {} | offline {:.3} | best K={} at {:.1}% of offline (>= 90%), worst at {:.1}% of best (<= 90%)",
            rows.join(" "),
            reference.mean_gain,
            report.best_k,
            100.0 * best.mean_gain / reference.mean_gain,
            100.0 * worst.mean_gain / best.mean_gain
        ),
    )
}

fn criterion_8() -> Verdict {
    let mut cfg = config("q4-uma-u4.toml");
    cfg.antennas = 64;
    cfg.noise = NoiseModel::default();
    let system = cfg.system().expect("system");
    let link = LinkContext::from_system(&system);
    let sizes = [8usize, 16, 32, 64];
    let prbs = 20;
    let mut times = Vec::new();
    let mut rounds_ok = true;
    for &u in &sizes {
        let slices = build_slices(&[(1.0, u)]).expect("slices");
        let realization =
            sample_channel_realization(&system, &slices, prbs, 8).expect("realization");
        let candidates: Vec<usize> = (0..u).collect();
        let mut samples = Vec::new();
        for _ in 0..3 {
            for n in 0..prbs {
                let weights: Vec<f64> = (0..u)
                    .map(|i| 1.0 / (1.0 + (i + n) as f64 % 7.0) / 1e6)
                    .collect();
                let problem = SelectionProblem {
                    channel: realization.channel(n),
                    candidates: &candidates,
                    weights: &weights,
                    power_budget_w: link.power_budget_w,
                    noise_power_w: link.noise_power_w,
                    table: link.table,
                };
                let start = Instant::now();
                let outcome = select_k(&problem, 8);
                samples.push(start.elapsed().as_secs_f64());
                rounds_ok &= outcome.rounds == 2;
            }
        }
        samples.sort_by(f64::total_cmp);
        times.push(samples[samples.len() / 2]);

        let params = FrameParams {
            strategy: SelectionStrategy::Online { k: 8 },
            ..FrameParams::default()
        };
        let frame = fgss_frame(&realization, &slices, &[1e8], link, &params, None).expect("frame");
        rounds_ok &= frame.total_rounds == 2 * prbs;
    }
    let xs: Vec<f64> = sizes.iter().map(|&u| (u as f64).ln()).collect();
    let ys: Vec<f64> = times.iter().map(|t| t.ln()).collect();
    let mx = xs.iter().sum::<f64>() / 4.0;
    let my = ys.iter().sum::<f64>() / 4.0;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let step_ok = times.windows(2).all(|w| w[1] / w[0] <= 4.0 * 1.25);
    let shown: Vec<String> = sizes
        .iter()
        .zip(&times)
        .map(|(u, t)| format!("U={u}:{:.0}us", t * 1e6))
        .collect();
    verdict(
        rounds_ok && slope <= 2.2 && step_ok,
        format!(
            "M=64, K=8: rounds per PRB == 2 {rounds_ok}; median PRB time {}; log-log slope {slope:.2} (<= 2.2)",
            shown.join(" ")
        ),
    )
}

fn criterion_9(exact: &Campaign) -> Verdict {
    let mut cfg = exact.config.clone();
    cfg.estimator = EstimatorChoice::Perturbed {
        amplitude: 0.05,
        salt: 9,
    };
    let perturbed = campaign(&cfg);
    let m0 = exact.stats.slice_gain_pct.as_ref().expect("gains").median;
    let m1 = perturbed
        .stats
        .slice_gain_pct
        .as_ref()
        .expect("gains")
        .median;
    verdict(
        (m0 - m1).abs() <= 3.0,
        format!(
            "{}: median gain exact targets {m0:.2}%, +-5% targets {m1:.2}%, difference {:.2} points (<= 3)",
            cfg.name,
            (m0 - m1).abs()
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let timed = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        let start = Instant::now();
        let v = f();
        let t = start.elapsed().as_secs_f64();
        println!(
            "{} criterion {n} ({name}): {} [{t:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        v.pass
    };
    let mut all = true;
    all &= timed(1, "rate function", &mut criterion_1);
    all &= timed(2, "zero forcing", &mut criterion_2);
    all &= timed(3, "power allocation", &mut criterion_3);
    all &= timed(4, "scheduler recursions", &mut criterion_4);

    let start = Instant::now();
    let a = campaign(&config("a.toml"));
    let b = campaign(&config("b.toml"));
    let c = campaign(&config("c.toml"));
    let d = campaign(&config("d.toml"));
    let prep = start.elapsed().as_secs_f64();
    let runs = [
        ("Q2-identical", false, &a),
        ("Q2-0.25/0.75", true, &b),
        ("Q4-identical", false, &c),
        ("Q4-0.4/0.3/0.2/0.1", true, &d),
    ];
    let (v5, v6) = criteria_5_6(&runs);
    for (n, name, v) in [(5, "cross-subsidization", v5), (6, "isolation", v6)] {
        println!(
            "{} criterion {n} ({name}): {} [campaigns {prep:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        all &= v.pass;
    }
    all &= timed(7, "Select(K) quality", &mut criterion_7);
    all &= timed(8, "complexity", &mut criterion_8);
    all &= timed(9, "estimator substitution", &mut || criterion_9(&c));
    if !all {
        std::process::exit(1);
    }
}
