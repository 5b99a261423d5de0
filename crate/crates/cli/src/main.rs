use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedsim_core::config::{SimConfig, WorkerBehavior};
use fedsim_core::protocol::{simulate, EpochRecord, ProtocolError, RunOutput};
use serde::Serialize;

const DEFAULT_OUT_DIR: &str = "fedsim-out";

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Simulate ledger-coordinated decentralized federated learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write metrics.csv, report.json and ledger.jsonl.
    Run(SimArgs),
    /// Run the same configuration with and without encryption and compare.
    CompareEncryption(SimArgs),
    /// Run one simulation per worker count on the same data seed.
    ScaleWorkers {
        /// Comma-separated worker counts, e.g. 3,5.
        #[arg(long, value_delimiter = ',', required = true)]
        workers_list: Vec<usize>,
        #[command(flatten)]
        sim: SimArgs,
    },
}

#[derive(Args, Clone, Default)]
struct SimArgs {
    /// JSON file with a full or partial configuration; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    rounds: Option<u32>,
    #[arg(long)]
    epochs_per_round: Option<usize>,
    #[arg(long)]
    top_k: Option<u32>,
    #[arg(long)]
    reward: Option<u64>,
    #[arg(long)]
    collateral: Option<u64>,
    #[arg(long, overrides_with = "no_encrypt")]
    encrypt: bool,
    #[arg(long, overrides_with = "encrypt")]
    no_encrypt: bool,
    /// Falls back to FEDSIM_SEED when neither the flag nor the config file sets it.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset_n: Option<usize>,
    #[arg(long)]
    dataset_dim: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    spread: Option<f64>,
    /// Comma list such as honest,honest,inflated or nonsubmitter:2:0.5.
    #[arg(long, value_delimiter = ',')]
    behaviors: Option<Vec<WorkerBehavior>>,
    #[arg(long)]
    push_window: Option<usize>,
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    out_dir: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Run(ProtocolError),
    Io(String),
    MismatchedModels,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 1,
            Self::Run(e) if e.is_config_error() => 1,
            Self::Run(_) | Self::Io(_) => 2,
            Self::MismatchedModels => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "invalid configuration: {m}"),
            Self::Run(e) => e.fmt(f),
            Self::Io(m) => f.write_str(m),
            Self::MismatchedModels => f.write_str("encrypted and plain runs produced different final models"),
        }
    }
}

impl From<ProtocolError> for CliError {
    fn from(e: ProtocolError) -> Self {
        Self::Run(e)
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

impl SimArgs {
    fn resolve(&self) -> Result<SimConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let value: serde_json::Value =
                    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let has_seed = value.get("seed").is_some();
                let mut cfg: SimConfig =
                    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                if !has_seed {
                    cfg.seed = env_seed()?.unwrap_or(cfg.seed);
                }
                cfg
            }
            None => {
                let mut cfg = SimConfig::default();
                cfg.seed = env_seed()?.unwrap_or(cfg.seed);
                cfg
            }
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field.clone() { $target = v; })*
            };
        }
        set! {
            workers => cfg.workers,
            rounds => cfg.rounds,
            epochs_per_round => cfg.epochs_per_round,
            top_k => cfg.top_k,
            reward => cfg.reward,
            collateral => cfg.collateral,
            seed => cfg.seed,
            dataset_n => cfg.dataset.n,
            dataset_dim => cfg.dataset.dim,
            classes => cfg.dataset.classes,
            spread => cfg.dataset.spread,
            behaviors => cfg.behaviors,
            push_window => cfg.push_window,
        }
        if self.encrypt {
            cfg.encrypt = true;
        }
        if self.no_encrypt {
            cfg.encrypt = false;
        }
        if self.parallel {
            cfg.parallel = true;
        }
        if self.out_dir.is_some() {
            cfg.out_dir = self.out_dir.clone();
        }
        Ok(cfg)
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("FEDSIM_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("FEDSIM_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn validated(cfg: SimConfig) -> Result<SimConfig, CliError> {
    cfg.validate().map_err(|e| CliError::Config(e.0))?;
    Ok(cfg)
}

fn out_dir(cfg: &SimConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(cfg.out_dir.as_deref().unwrap_or(DEFAULT_OUT_DIR));
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    Ok(dir)
}

fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_run(dir: &Path, out: &mut RunOutput) -> Result<(), CliError> {
    write_csv(&dir.join("metrics.csv"), &out.report.epochs)?;

    let log_path = dir.join("ledger.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    for event in &out.events {
        serde_json::to_writer(&mut log, event).map_err(|e| CliError::Io(e.to_string()))?;
        log.write_all(b"\n").map_err(io_err(&log_path))?;
    }
    log.flush().map_err(io_err(&log_path))?;

    out.report.ledger_log = Some(log_path.display().to_string());
    let report_path = dir.join("report.json");
    let file = File::create(&report_path).map_err(io_err(&report_path))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &out.report).map_err(|e| CliError::Io(e.to_string()))
}

fn summary_line(out: &RunOutput) -> String {
    let s = &out.report.summary;
    let slashed = if s.slashed.is_empty() {
        String::new()
    } else {
        let names: Vec<&str> = s.slashed.iter().map(|a| a.as_str()).collect();
        format!(", slashed {}", names.join(","))
    };
    let payouts: Vec<String> = s.balances.iter().map(|(a, t)| format!("{a}={t}")).collect();
    format!(
        "accuracy {:.4}, runtime {:.2}s, payouts {}{slashed}",
        s.final_metrics.accuracy,
        out.report.cost.wall_ms / 1e3,
        payouts.join(" ")
    )
}

fn cmd_run(args: &SimArgs) -> Result<(), CliError> {
    let cfg = validated(args.resolve()?)?;
    let dir = out_dir(&cfg)?;
    let mut out = simulate(&cfg)?;
    write_run(&dir, &mut out)?;
    println!("{}", summary_line(&out));
    Ok(())
}

#[derive(Serialize)]
struct TimingRow {
    mode: &'static str,
    wall_ms: f64,
    overhead_fraction: f64,
}

fn cmd_compare_encryption(args: &SimArgs) -> Result<(), CliError> {
    let cfg = validated(args.resolve()?)?;
    let dir = out_dir(&cfg)?;
    let sealed = simulate(&SimConfig {
        encrypt: true,
        ..cfg.clone()
    })?;
    let plain = simulate(&SimConfig { encrypt: false, ..cfg })?;
    let identical = sealed.final_model_bytes() == plain.final_model_bytes();
    let overhead = (sealed.report.cost.wall_ms - plain.report.cost.wall_ms) / plain.report.cost.wall_ms;
    write_csv(
        &dir.join("timing.csv"),
        [
            TimingRow {
                mode: "plain",
                wall_ms: plain.report.cost.wall_ms,
                overhead_fraction: 0.0,
            },
            TimingRow {
                mode: "encrypted",
                wall_ms: sealed.report.cost.wall_ms,
                overhead_fraction: overhead,
            },
        ],
    )?;
    if !identical {
        return Err(CliError::MismatchedModels);
    }
    println!(
        "models identical, encrypted {:.2}s vs plain {:.2}s, overhead_fraction {overhead:.3}",
        sealed.report.cost.wall_ms / 1e3,
        plain.report.cost.wall_ms / 1e3
    );
    Ok(())
}

#[derive(Serialize)]
struct ScaleRow<'a> {
    workers: usize,
    round: u32,
    epoch: usize,
    worker: &'a str,
    accuracy: f64,
    macro_precision: f64,
    macro_recall: f64,
    elapsed_ms: f64,
}

fn cmd_scale_workers(counts: &[usize], args: &SimArgs) -> Result<(), CliError> {
    let base = args.resolve()?;
    let configs = counts
        .iter()
        .map(|&workers| validated(SimConfig { workers, ..base.clone() }))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = out_dir(&base)?;
    let mut runs = Vec::new();
    for cfg in &configs {
        let out = simulate(cfg)?;
        println!("workers {}: {}", cfg.workers, summary_line(&out));
        runs.push((cfg.workers, out.report.epochs));
    }
    let rows = runs.iter().flat_map(|(workers, epochs)| {
        epochs.iter().map(move |e: &EpochRecord| ScaleRow {
            workers: *workers,
            round: e.round,
            epoch: e.epoch,
            worker: e.worker.as_str(),
            accuracy: e.accuracy,
            macro_precision: e.macro_precision,
            macro_recall: e.macro_recall,
            elapsed_ms: e.elapsed_ms,
        })
    });
    write_csv(&dir.join("scaling.csv"), rows)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::CompareEncryption(args) => cmd_compare_encryption(args),
        Command::ScaleWorkers { workers_list, sim } => cmd_scale_workers(workers_list, sim),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
