use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand, ValueEnum};

use stockcast::config::RunConfig;
use stockcast::ensemble::{self, EnsembleBundle, LearnerKind};
use stockcast::eval::{self, WeightMode};
use stockcast::features;
use stockcast::market::PanelManifest;
use stockcast::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_GATE: u8 = 3;

/// Weighted-ensemble stock price forecasting.
///
/// Exit codes: 0 success, 1 usage error, 2 data or validation error,
/// 3 invariant-gate failure.
#[derive(Debug, Parser)]
#[command(name = "stockcast", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data generation, network initialization and weight search.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir` in the config).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic market (company CSVs, index CSVs, manifest).
    GenData,
    /// Train one company's ensemble and write `<company>.bundle.json`.
    Train(TrainArgs),
    /// Forecast from a saved bundle at an anchor date.
    Predict(PredictArgs),
    /// Train and score every company at daily and weekly horizons.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Company symbol in the panel.
    #[arg(long)]
    company: String,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Bundle written by `train`.
    #[arg(long, value_name = "PATH")]
    bundle: PathBuf,
    /// Anchor date (YYYY-MM-DD); the panel's last date when omitted.
    #[arg(long)]
    date: Option<NaiveDate>,
    /// Company to forecast; the bundle's own company when omitted.
    #[arg(long)]
    company: Option<String>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Learner {
    Ann,
    Cart,
    Gpr,
}

impl From<Learner> for LearnerKind {
    fn from(l: Learner) -> Self {
        match l {
            Learner::Ann => LearnerKind::Ann,
            Learner::Cart => LearnerKind::Cart,
            Learner::Gpr => LearnerKind::Gpr,
        }
    }
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    /// Fit one weight vector over all companies instead of one per company.
    #[arg(long)]
    pooled: bool,
    /// Make a learner emit NaN at test time (exercises the failure path).
    #[arg(long, value_name = "LEARNER")]
    inject_nan: Option<Learner>,
}

#[derive(Debug)]
enum Failure {
    Data(Error),
    Gate(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Gate(msg)) => {
            eprintln!("gate failure: {msg}");
            ExitCode::from(EXIT_GATE)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let mut config = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        config.set_seed(seed);
    }
    if let Some(out) = cli.global.out {
        config.output_dir = out;
    }
    config.validate()?;
    match cli.command {
        Command::GenData => gen_data(&config),
        Command::Train(args) => train(&config, &args),
        Command::Predict(args) => predict(&config, &args),
        Command::Benchmark(args) => benchmark(&config, &args),
    }
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(config: &RunConfig) -> CmdResult {
    let panel = eval::generate_synth_market(&config.synth)?;
    let dir = &config.output_dir;
    create_dir(dir)?;
    let mut companies = Vec::new();
    for c in &panel.companies {
        let name = PathBuf::from(format!("{}.csv", c.symbol()));
        write(&dir.join(&name), &c.to_csv())?;
        companies.push(name);
    }
    write(&dir.join("MARKET.csv"), &panel.market_index.to_csv())?;
    write(&dir.join("SECTOR.csv"), &panel.sector_index.to_csv())?;
    let manifest = PanelManifest {
        market_index: PathBuf::from("MARKET.csv"),
        sector_index: Some(PathBuf::from("SECTOR.csv")),
        companies,
    };
    let manifest_path = dir.join("manifest.toml");
    manifest.write(&manifest_path)?;
    println!(
        "wrote {} companies x {} records to {}",
        panel.companies.len(),
        panel.len(),
        manifest_path.display()
    );
    Ok(())
}

fn train(config: &RunConfig, args: &TrainArgs) -> CmdResult {
    let panel = config.load_panel()?;
    if panel.company(&args.company).is_none() {
        return Err(Error::Validation(format!(
            "unknown company {:?}; available: {}",
            args.company,
            panel.symbols().join(", ")
        ))
        .into());
    }
    let run = ensemble::train_ensemble(&panel, &args.company, &config.features, &config.train_params())?;
    create_dir(&config.output_dir)?;
    let path = config.output_dir.join(format!("{}.bundle.json", args.company));
    run.bundle.save(&path)?;
    let w = run.bundle.weights;
    println!("weights a={} b={} c={}", w.a, w.b, w.c);
    println!("validation fitness {}", run.bundle.validation_fitness);
    println!("bundle {}", path.display());
    Ok(())
}

fn predict(config: &RunConfig, args: &PredictArgs) -> CmdResult {
    let bundle = EnsembleBundle::load(&args.bundle)?;
    let panel = config.load_panel()?;
    let symbol = args.company.as_deref().unwrap_or(&bundle.provenance.company);
    let company = panel.company(symbol).ok_or_else(|| {
        Error::Validation(format!("unknown company {symbol:?}; available: {}", panel.symbols().join(", ")))
    })?;
    let k = match args.date {
        Some(d) => company
            .index_of(d)
            .ok_or_else(|| Error::Validation(format!("date {d} is not a trading day in the panel")))?,
        None => company.len() - 1,
    };
    let feats = features::build_features(&panel, company, k, &bundle.feature_config)?;
    let f = bundle.forecast(&feats)?;
    println!(
        "anchor {} horizon {} ensemble {} ann {} cart {} gpr {}",
        company.dates()[k],
        bundle.feature_config.horizon,
        f.ensemble,
        f.ann,
        f.cart,
        f.gpr
    );
    Ok(())
}

fn benchmark(config: &RunConfig, args: &BenchmarkArgs) -> CmdResult {
    let panel = config.load_panel()?;
    let mut bench = config.benchmark.clone();
    if args.pooled {
        bench.weight_mode = WeightMode::Pooled;
    }
    if let Some(l) = args.inject_nan {
        bench.inject_nan_learner = Some(l.into());
    }
    let report = eval::run_benchmark(&panel, &bench, &config.train_params())?;
    eval::emit_report(&report, &config.output_dir)?;

    for horizon in report.horizons() {
        for m in eval::Model::ALL {
            if let Some(a) = report.aggregate(&horizon, m) {
                println!(
                    "{horizon:<7} {:<9} error_rate {:.5} mae {:.4} rmse {:.4}",
                    m.name(),
                    a.error_rate,
                    a.mae,
                    a.rmse
                );
            }
        }
    }
    for f in &report.failures {
        eprintln!("failed: {} ({}): {}", f.company, f.horizon, f.error);
    }
    for g in &report.gates {
        let status = match (g.passed, g.hard) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "WARN",
        };
        println!("gate {status} {}: {}", g.name, g.detail);
    }
    println!("report {}", config.output_dir.join("report.json").display());
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.gates.iter().filter(|g| g.hard && !g.passed).map(|g| g.name.as_str()).collect();
        Err(Failure::Gate(failed.join(", ")))
    }
}
