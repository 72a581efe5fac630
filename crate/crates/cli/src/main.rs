use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fgss::harness::{self, EstimatorChoice, ExperimentConfig, RunOptions};
use fgss::predictor::{EstimatorRequest, EstimatorResponse, ExternalEstimator, TableEstimator};
use fgss::scheduler::SelectionStrategy;
use fgss::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_THRESHOLD: u8 = 3;
const EXIT_PARTIAL: u8 = 4;

type AskFn = Box<dyn FnMut(&EstimatorRequest) -> fgss::Result<EstimatorResponse>>;

#[derive(Parser)]
#[command(
    name = "fgss",
    version,
    about = "Slice-aware spectrum sharing simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run benchmark and sharing frames over all seeds and write artifacts.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write per-PRB JSONL traces under <out>/traces.
        #[arg(long)]
        trace: bool,
    },
    /// Sweep K for the online selection and report the best one.
    TuneK {
        #[command(flatten)]
        common: Common,
        /// Comma-separated K values; defaults to the config's `k_grid`.
        #[arg(long, value_delimiter = ',')]
        k_grid: Vec<usize>,
        /// Also run the offline reference selection.
        #[arg(long)]
        reference: bool,
    },
    /// Write the labelled benchmark dataset of the config's `[dataset]` grid.
    ExportDataset {
        #[command(flatten)]
        common: Common,
        /// Output JSONL file.
        #[arg(long)]
        output: PathBuf,
    },
    /// Score the configured table or external estimator on a dataset.
    PredictCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Turn campaign artifacts into plot-data files.
    Plot {
        /// Directory holding campaign, K-sweep and MAPE artifacts.
        #[arg(long)]
        artifacts: PathBuf,
        /// Output directory; defaults to <artifacts>/plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    config: PathBuf,
    /// Explicit seeds, replacing the config's seed list.
    #[arg(long, value_delimiter = ',')]
    seed_list: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Use online selection with this K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    antennas: Option<usize>,
    #[arg(long)]
    subchannels: Option<usize>,
    #[arg(long)]
    slots: Option<usize>,
    /// Replace the estimator with an external command (whitespace separated).
    #[arg(long)]
    estimator_command: Option<String>,
    /// Replace the estimator with a prediction table file.
    #[arg(long)]
    estimator_table: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_)
            | Error::InvalidScenario(_)
            | Error::InvalidRateTable(_)
            | Error::Toml(_)
            | Error::MissingArtifact(_) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::from_path(&common.config).map_err(Failure::config)?;
    if !common.seed_list.is_empty() {
        cfg.seeds = common.seed_list.clone();
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(v) = common.rho {
        cfg.rho = v;
    }
    if let Some(v) = common.epsilon {
        cfg.epsilon = v;
    }
    if let Some(k) = common.k {
        cfg.selection = SelectionStrategy::Online { k };
    }
    if let Some(v) = common.antennas {
        cfg.antennas = v;
    }
    if let Some(v) = common.subchannels {
        cfg.subchannels = v;
    }
    if let Some(v) = common.slots {
        cfg.slots = v;
    }
    if let Some(cmd) = &common.estimator_command {
        cfg.estimator = EstimatorChoice::External {
            command: cmd.split_whitespace().map(str::to_string).collect(),
        };
    }
    if let Some(path) = &common.estimator_table {
        cfg.estimator = EstimatorChoice::Table { path: path.clone() };
    }
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn run(common: &Common, trace: bool) -> Result<(), Failure> {
    let cfg = load(common)?;
    cfg.system().map_err(Failure::config)?;
    let options = RunOptions {
        trace_dir: trace.then(|| cfg.output_dir.join("traces")),
    };
    let campaign = harness::run_campaign(&cfg, &options)?;
    let files = harness::write_campaign(&campaign, &cfg.output_dir)?;
    for f in &files {
        println!("wrote {}", f.display());
    }
    let s = &campaign.stats;
    if let Some(p) = &s.mean_gain_pct {
        println!(
            "seeds {} failed {} | mean gain {:.2}% (median {:.2}%, IQR {:.2}) | isolation {:.3} | spread ok {:.3}",
            s.seeds,
            s.failed_seeds,
            p.mean,
            p.median,
            p.iqr(),
            s.isolation_rate,
            s.spread_ok_rate
        );
    }
    if campaign.too_many_failures() {
        return Err(Failure {
            code: EXIT_PARTIAL,
            message: format!(
                "{} of {} seeds failed",
                s.failed_seeds,
                s.failed_seeds + s.seeds
            ),
        });
    }
    let missed = s.check(&cfg.thresholds);
    if !missed.is_empty() {
        return Err(Failure {
            code: EXIT_THRESHOLD,
            message: missed.join("; "),
        });
    }
    Ok(())
}

fn tune_k(common: &Common, grid: &[usize], reference: bool) -> Result<(), Failure> {
    let cfg = load(common)?;
    let grid = if grid.is_empty() {
        cfg.k_grid.clone()
    } else {
        grid.to_vec()
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(Failure::config("K grid must be non-empty and positive"));
    }
    cfg.system().map_err(Failure::config)?;
    let report = harness::tune_k(&cfg, &grid, reference)?;
    let path = harness::write_tune_k(&report, &cfg.output_dir)?;
    println!("wrote {}", path.display());
    for r in report.rows.iter().chain(&report.reference) {
        let k = r.k.map_or_else(|| "ref".to_string(), |k| k.to_string());
        println!(
            "K={k:>4}  mean gain {:.4} (std {:.4})",
            r.mean_gain, r.std_gain
        );
    }
    println!("best K = {}", report.best_k);
    Ok(())
}

fn export_dataset(common: &Common, output: &Path) -> Result<(), Failure> {
    let cfg = load(common)?;
    if cfg.dataset.configs().is_empty() {
        return Err(Failure::config("config has an empty [dataset] grid"));
    }
    cfg.system().map_err(Failure::config)?;
    let n = harness::export_dataset(&cfg, output)?;
    println!("wrote {n} records to {}", output.display());
    Ok(())
}

fn predict_check(common: &Common, dataset: &Path) -> Result<(), Failure> {
    let cfg = load(common)?;
    let mut ask: AskFn = match &cfg.estimator {
        EstimatorChoice::Table { path } => {
            let table = TableEstimator::from_path(path)?;
            Box::new(move |r| table.lookup(r))
        }
        EstimatorChoice::External { command } => {
            let mut ext = ExternalEstimator::spawn("external", &command[0], &command[1..])?;
            Box::new(move |r| ext.request(r))
        }
        _ => {
            return Err(Failure::config(
                "predict-check needs a table or external estimator",
            ))
        }
    };
    let report = harness::predict_check(dataset, cfg.subchannels, &mut ask)?;
    let path = harness::write_mape(&report, &cfg.output_dir)?;
    println!("wrote {}", path.display());
    println!("{} records, MAPE {:.3}%", report.records, report.mape_pct);
    if let Some(max) = cfg.thresholds.max_mape_pct {
        if report.mape_pct > max {
            return Err(Failure {
                code: EXIT_THRESHOLD,
                message: format!("MAPE {:.3}% > {max}%", report.mape_pct),
            });
        }
    }
    Ok(())
}

fn plot(artifacts: &Path, out: Option<&Path>) -> Result<(), Failure> {
    let out = out.map_or_else(|| artifacts.join("plots"), Path::to_path_buf);
    for f in harness::emit_plots(artifacts, &out)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, trace } => run(common, *trace),
        Command::TuneK {
            common,
            k_grid,
            reference,
        } => tune_k(common, k_grid, *reference),
        Command::ExportDataset { common, output } => export_dataset(common, output),
        Command::PredictCheck { common, dataset } => predict_check(common, dataset),
        Command::Plot { artifacts, out } => plot(artifacts, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
