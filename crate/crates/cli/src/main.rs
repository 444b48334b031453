use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use gmv_core::backtest::{run_backtest, BacktestConfig, BacktestError};
use gmv_core::covariance::Estimator;
use gmv_core::market_data::{prices_to_returns, synth_factor_returns_with, DataError, PricePanel, ReturnPanel, SynthParams};
use gmv_core::portfolio::ModelKind;
use gmv_core::report::{read_config, write_result_dir, ReportError, RunReport, NONDETERMINISTIC_FILES};
use gmv_core::table::LabeledTable;

#[derive(Parser, Debug)]
#[command(name = "gmv", version, about = "Minimum-variance portfolio backtests with LASSO and turnover constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Convert a price CSV into a validated return CSV.
    Ingest(IngestArgs),
    /// Generate a synthetic factor-model return panel.
    Synth(SynthArgs),
    /// Run the rolling-window backtest and write a result directory.
    Backtest(BacktestArgs),
    /// Print the summary table of one or more result directories.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Price CSV: `date` column followed by one column per asset.
    prices: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Window length used for the reported concentration ratio n/tau.
    #[arg(long, default_value_t = 504)]
    tau: usize,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    n: usize,
    #[arg(long = "t")]
    t: usize,
    /// Number of factors K.
    #[arg(long, default_value_t = 3)]
    factors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.01)]
    factor_vol: f64,
    #[arg(long, default_value_t = 0.015)]
    idio_vol: f64,
    /// Centre of the first factor's loadings.
    #[arg(long, default_value_t = 0.0)]
    market_loading: f64,
    /// Return CSV; the population covariance goes next to it as
    /// `<stem>_sigma_true.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BacktestArgs {
    /// Return CSV.
    panel: PathBuf,
    /// JSON config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Recorded in the manifest.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    estimator: Option<Estimator>,
    /// Comma-separated subset of standard, lasso, lasso-turnover.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<ModelKind>>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    cv_holdout: Option<usize>,
    /// Turnover cap; `inf` disables it.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    cv_fast: bool,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Result directories (one per estimator, typically).
    #[arg(required = true)]
    dirs: Vec<PathBuf>,
    /// Also write the merged report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Validation(anyhow::Error),
    Numerical(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Validation(e) | Failure::Numerical(e) => e,
        }
    }
}

fn validation(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Validation(e.into())
}

fn from_report(stage: &str, e: ReportError) -> Failure {
    let numerical = matches!(e, ReportError::Metrics { .. });
    let e = anyhow!(e).context(format!("{stage} failed"));
    if numerical {
        Failure::Numerical(e)
    } else {
        Failure::Validation(e)
    }
}

fn from_data(stage: &str, e: DataError) -> Failure {
    Failure::Validation(anyhow!(e).context(format!("{stage} failed")))
}

#[derive(Serialize)]
struct RunManifest {
    tool: String,
    version: String,
    seed: u64,
    input_digest: String,
    config_digest: String,
    outputs: BTreeMap<String, String>,
    started_at: String,
    finished_at: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn digest_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display())).map_err(validation)?;
    Ok(sha256_hex(&bytes))
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn ingest(args: IngestArgs) -> Result<(), Failure> {
    let prices = PricePanel::read_csv_path(&args.prices).map_err(|e| from_data("ingest", e))?;
    let returns = prices_to_returns(&prices).map_err(|e| from_data("ingest", e))?;
    returns.write_csv_path(&args.out).map_err(|e| from_data("ingest", e))?;
    let n = returns.n_assets();
    println!("assets n = {n}");
    println!("returns T = {}", returns.n_obs());
    if args.tau > 0 {
        println!("concentration n/tau = {:.4} (tau = {})", n as f64 / args.tau as f64, args.tau);
    }
    Ok(())
}

fn sigma_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("panel");
    out.with_file_name(format!("{stem}_sigma_true.csv"))
}

fn synth(args: SynthArgs) -> Result<(), Failure> {
    let params = SynthParams::new(args.n, args.t, args.factors, args.seed)
        .with_vols(args.factor_vol, args.idio_vol)
        .with_market_loading(args.market_loading);
    let synthetic = synth_factor_returns_with(params).map_err(|e| from_data("synth", e))?;
    synthetic.panel.write_csv_path(&args.out).map_err(|e| from_data("synth", e))?;
    let ids = synthetic.panel.asset_ids().to_vec();
    let sigma = LabeledTable {
        index_name: "asset".into(),
        row_labels: ids.clone(),
        column_labels: ids,
        values: synthetic.sigma_true.clone(),
    };
    let sigma_file = sigma_path(&args.out);
    sigma
        .write_path(&sigma_file)
        .map_err(|e| from_data("synth", DataError::from(e)))?;
    println!("wrote {} ({} x {})", args.out.display(), args.t, args.n);
    println!("wrote {}", sigma_file.display());
    Ok(())
}

fn build_config(args: &BacktestArgs) -> Result<BacktestConfig, Failure> {
    let mut config = match &args.config {
        Some(path) => read_config(path).map_err(|e| from_report("reading config", e))?,
        None => BacktestConfig::default(),
    };
    if let Some(e) = args.estimator {
        config.estimator = e;
    }
    if let Some(m) = &args.models {
        config.models = m.clone();
    }
    if let Some(t) = args.tau {
        config.tau = t;
    }
    if let Some(h) = args.cv_holdout {
        config.cv_holdout = h;
    }
    if let Some(k) = args.k {
        config.k = k;
    }
    if let Some(g) = &args.lambda_grid {
        config.lambda_grid = g.clone();
    }
    if args.cv_fast {
        config.cv_fast = true;
    }
    config
        .validate()
        .map_err(|e| validation(anyhow!(e).context("config validation failed")))?;
    Ok(config)
}

fn backtest(args: BacktestArgs) -> Result<(), Failure> {
    let started_at = now();
    let config = build_config(&args)?;
    let panel = ReturnPanel::read_csv_path(&args.panel).map_err(|e| from_data("reading panel", e))?;
    let input_digest = digest_file(&args.panel)?;
    let config_json = serde_json::to_string(&config).map_err(validation)?;

    let result = run_backtest(&panel, &config).map_err(|e: BacktestError| {
        let validation_error = e.is_validation();
        let e = anyhow!(e).context("backtest failed");
        if validation_error {
            Failure::Validation(e)
        } else {
            Failure::Numerical(e)
        }
    })?;
    let report = write_result_dir(&result, &args.out).map_err(|e| from_report("writing results", e))?;

    let mut outputs = BTreeMap::new();
    let entries = fs::read_dir(&args.out)
        .with_context(|| format!("cannot list {}", args.out.display()))
        .map_err(validation)?;
    for entry in entries {
        let entry = entry.map_err(validation)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && !NONDETERMINISTIC_FILES.contains(&name.as_str()) {
            outputs.insert(name, digest_file(&entry.path())?);
        }
    }
    let manifest = RunManifest {
        tool: "gmv".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        input_digest,
        config_digest: sha256_hex(config_json.as_bytes()),
        outputs,
        started_at,
        finished_at: now(),
    };
    let manifest_path = args.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(validation)?;
    fs::write(&manifest_path, text + "\n")
        .with_context(|| format!("cannot write {}", manifest_path.display()))
        .map_err(validation)?;

    println!("{} out-of-sample days, {} assets", report.n_days, report.n_assets);
    print!("{}", report.render_table());
    println!("results in {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut merged: Option<RunReport> = None;
    for dir in &args.dirs {
        let r = RunReport::read_path(dir.join("report.json")).map_err(|e| from_report("reading report", e))?;
        match merged.as_mut() {
            Some(m) => m.merge(r),
            None => merged = Some(r),
        }
    }
    let merged = merged.expect("at least one directory");
    print!("{}", merged.render_table());
    if let Some(out) = &args.out {
        let text = serde_json::to_string_pretty(&merged).map_err(validation)?;
        fs::write(out, text + "\n")
            .with_context(|| format!("cannot write {}", out.display()))
            .map_err(validation)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Backtest(a) => backtest(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error());
            ExitCode::from(f.code())
        }
    }
}
