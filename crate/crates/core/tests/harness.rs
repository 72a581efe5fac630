use std::fs;
use std::path::Path;

use fgss::harness::{
    emit_plots, export_dataset, predict_check, run_campaign, tune_k, write_campaign, write_mape,
    write_tune_k, EstimatorChoice, ExperimentConfig, RunOptions, PLOT_FAMILIES,
};
use fgss::predictor::{read_dataset, TableEstimator, WireResponse};
use fgss::scheduler::PrbDecision;
use fgss::Error;

const SMALL: &str = r#"
name = "small"
scenario = "UMa"
antennas = 4
subchannels = 4
slots = 5
rho = 0.1
seed_start = 1
seed_count = 3

[[slices]]
share = 0.5
users = 2

[[slices]]
share = 0.5
users = 2
"#;

fn small() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(SMALL).unwrap()
}

#[test]
fn config_defaults_and_seed_resolution() {
    let cfg = small();
    assert_eq!(cfg.resolved_seeds(), vec![1, 2, 3]);
    assert_eq!(cfg.num_prbs(), 20);
    assert_eq!(cfg.rho, 0.1);
    assert_eq!(cfg.epsilon, 1e-3);
    let mut explicit = cfg.clone();
    explicit.seeds = vec![9, 4];
    assert_eq!(explicit.resolved_seeds(), vec![9, 4]);
    let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
    assert_eq!(again, cfg);
}

#[test]
fn config_rejects_bad_input() {
    let unknown = format!("{SMALL}\nbogus = 1\n");
    assert!(matches!(
        ExperimentConfig::from_toml_str(&unknown),
        Err(Error::Toml(_))
    ));
    let shares = SMALL.replacen("share = 0.5", "share = 0.6", 1);
    assert!(matches!(
        ExperimentConfig::from_toml_str(&shares),
        Err(Error::InvalidConfig(_))
    ));
    let no_seeds = SMALL.replace("seed_count = 3", "");
    assert!(matches!(
        ExperimentConfig::from_toml_str(&no_seeds),
        Err(Error::InvalidConfig(_))
    ));
    let bad_scenario = SMALL.replace("\"UMa\"", "\"Moon\"");
    assert!(ExperimentConfig::from_toml_str(&bad_scenario).is_err());
}

#[test]
fn single_slice_gain_is_one() {
    let mut cfg = small();
    cfg.slices.truncate(1);
    cfg.slices[0].share = 1.0;
    cfg.seed_count = 1;
    let c = run_campaign(&cfg, &RunOptions::default()).unwrap();
    let g = c.outcomes[0].frame.gains[0];
    assert!((g - 1.0).abs() <= 0.02, "gain {g}");
}

#[test]
fn campaign_reruns_bit_exactly() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let first = write_campaign(
        &run_campaign(&cfg, &RunOptions::default()).unwrap(),
        &dir.path().join("a"),
    )
    .unwrap();
    let second = write_campaign(
        &run_campaign(&cfg, &RunOptions::default()).unwrap(),
        &dir.path().join("b"),
    )
    .unwrap();
    for (a, b) in first.iter().zip(&second) {
        assert_eq!(
            fs::read(a).unwrap(),
            fs::read(b).unwrap(),
            "{}",
            a.display()
        );
    }
}

#[test]
fn campaign_stats_are_consistent() {
    let c = run_campaign(&small(), &RunOptions::default()).unwrap();
    assert_eq!(c.outcomes.len(), 3);
    assert!(c.failures.is_empty());
    let s = &c.stats;
    let p = s.slice_gain_pct.as_ref().unwrap();
    assert!(p.p10 <= p.p25 && p.p25 <= p.median && p.median <= p.p75 && p.p75 <= p.p90);
    assert_eq!(
        s.isolation_violations,
        c.outcomes.iter().filter(|o| !o.isolated()).count()
    );
    for o in &c.outcomes {
        assert_eq!(o.targets, o.benchmark);
        assert_eq!(o.frame.gain_trace.len(), 20);
    }
}

#[test]
fn traces_hold_one_line_per_prb() {
    let mut cfg = small();
    cfg.seed_count = 1;
    let dir = tempfile::tempdir().unwrap();
    let options = RunOptions {
        trace_dir: Some(dir.path().to_path_buf()),
    };
    run_campaign(&cfg, &options).unwrap();
    for name in ["seed-1.jsonl", "benchmark-seed-1.jsonl"] {
        let text = fs::read_to_string(dir.path().join(name)).unwrap();
        let decisions: Vec<PrbDecision> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(decisions.len(), 20);
        assert!(decisions.iter().enumerate().all(|(i, d)| d.prb == i + 1));
    }
}

#[test]
fn stub_external_estimator_targets_are_rescaled() {
    let mut cfg = small();
    cfg.seed_count = 1;
    cfg.estimator = EstimatorChoice::External {
        command: vec![
            "sh".into(),
            "-c".into(),
            r#"while read -r line; do echo '{"pred_gm_bps":1.0,"model_version":"stub-0"}'; done"#
                .into(),
        ],
    };
    let c = run_campaign(&cfg, &RunOptions::default()).unwrap();
    let o = &c.outcomes[0];
    assert_eq!(o.targets, vec![1.0, 1.0]);
    assert_eq!(o.estimator_id, "external");
    for (q, g) in o.frame.gains.iter().enumerate() {
        let direct = o.frame.geomeans[q] / o.benchmark[q];
        assert!((g - direct).abs() <= 1e-12 * direct);
    }
}

#[test]
fn missing_table_entries_fail_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("table.jsonl");
    fs::write(&path, "").unwrap();
    let mut cfg = small();
    cfg.estimator = EstimatorChoice::Table { path };
    let c = run_campaign(&cfg, &RunOptions::default()).unwrap();
    assert!(c.outcomes.is_empty());
    assert_eq!(c.failures.len(), 3);
    assert!(c.too_many_failures());
}

fn write_all_artifacts(dir: &Path) {
    let mut cfg = small();
    cfg.seed_count = 2;
    write_campaign(&run_campaign(&cfg, &RunOptions::default()).unwrap(), dir).unwrap();
    write_tune_k(&tune_k(&cfg, &[1, 2], true).unwrap(), dir).unwrap();
    cfg.dataset.shares = vec![0.5];
    cfg.dataset.users = vec![2];
    let data = dir.join("dataset.jsonl");
    export_dataset(&cfg, &data).unwrap();
    let records = read_dataset(std::io::BufReader::new(fs::File::open(&data).unwrap())).unwrap();
    let mut table = Vec::new();
    for r in &records {
        let pred = WireResponse {
            pred_gm_bps: r.label_gm_bps * 1.1,
            model_version: "x".into(),
        };
        TableEstimator::write_line(&mut table, &r.request(), &pred).unwrap();
    }
    let table = TableEstimator::from_reader(&table[..]).unwrap();
    let report = predict_check(&data, cfg.subchannels, &mut |r| table.lookup(r)).unwrap();
    assert_eq!(report.records, 4);
    assert!((report.mape_pct - 10.0).abs() < 1e-9);
    write_mape(&report, dir).unwrap();
}

#[test]
fn plots_cover_six_families() {
    let dir = tempfile::tempdir().unwrap();
    write_all_artifacts(dir.path());
    let out = dir.path().join("plots");
    let files = emit_plots(dir.path(), &out).unwrap();
    let mut names: Vec<String> = files
        .iter()
        .map(|f| f.file_stem().unwrap().to_string_lossy().into())
        .collect();
    names.sort();
    let mut want: Vec<String> = PLOT_FAMILIES.iter().map(|s| s.to_string()).collect();
    want.sort();
    assert_eq!(names, want);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 6);

    let cdf = fs::read_to_string(out.join("cdf.csv")).unwrap();
    let ys: Vec<f64> = cdf
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*ys.last().unwrap(), 1.0);
}

#[test]
fn plots_name_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    write_all_artifacts(dir.path());
    fs::remove_file(dir.path().join("mape.csv")).unwrap();
    let out = dir.path().join("plots");
    match emit_plots(dir.path(), &out) {
        Err(Error::MissingArtifact(p)) => assert!(p.ends_with("mape.csv")),
        other => panic!("unexpected {other:?}"),
    }
    assert!(!out.exists());
}

#[test]
fn empty_campaign_writes_no_plots() {
    let dir = tempfile::tempdir().unwrap();
    write_all_artifacts(dir.path());
    let path = dir.path().join("table.jsonl");
    fs::write(&path, "").unwrap();
    let mut cfg = small();
    cfg.estimator = EstimatorChoice::Table { path };
    write_campaign(
        &run_campaign(&cfg, &RunOptions::default()).unwrap(),
        dir.path(),
    )
    .unwrap();
    let out = dir.path().join("plots");
    assert!(emit_plots(dir.path(), &out).is_err());
    assert!(!out.exists());
}

#[test]
fn tune_k_reports_every_k() {
    let cfg = small();
    let report = tune_k(&cfg, &[1, 2, 4], false).unwrap();
    assert_eq!(report.rows.len(), 3);
    assert!(report.reference.is_none());
    let best = report.best().mean_gain;
    assert!(report.rows.iter().all(|r| r.mean_gain <= best));
    assert!(tune_k(&cfg, &[], false).is_err());
}
