//! `setnet`: generate surrogate SET data, train LM networks, export
//! Verilog-A and run the inverter-chain strike experiment.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use setnet::dataset::DatasetError;
use setnet::mlp::{Architecture, MlpError, Transfer};
use setnet::oracle::OracleError;
use setnet::spicelet::SpiceError;
use setnet::trainer::TrainError;
use setnet::vacodegen::VaError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: file not found", .0.display())]
    Missing(PathBuf),
    #[error("{}:{line}: {message}", path.display())]
    Config { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Check(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Spice(#[from] SpiceError),
    #[error(transparent)]
    Va(#[from] VaError),
}

#[derive(Debug, Parser)]
#[command(name = "setnet", version, about = "SET current modeling pipeline", args_override_self = true)]
pub struct Cli {
    /// key=value file of flag defaults; flags on the command line win.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample the surrogate oracle on a grid and write a split dataset CSV.
    Generate(GenerateArgs),
    /// Train one architecture with Levenberg-Marquardt.
    Train(TrainArgs),
    /// Train a list of architectures and write an MSE table.
    Sweep(SweepArgs),
    /// Write a trained model as a Verilog-A current source.
    Export(ExportArgs),
    /// Strike the inverter chain for a list of LETs and write traces.
    Simulate(SimulateArgs),
    /// generate, train, export and simulate in one run.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Clone, Args)]
pub struct OutDir {
    /// Directory for outputs; relative file arguments resolve inside it.
    #[arg(long, env = "SETNET_OUT_DIR", default_value = "setnet-out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct OracleArgs {
    /// Rise time constant, s.
    #[arg(long, default_value_t = 10e-12)]
    pub tau_rise: f64,
    /// Fall time constant, s.
    #[arg(long, default_value_t = 200e-12)]
    pub tau_fall: f64,
    /// Deposited charge, fC per unit LET per um of depth.
    #[arg(long, default_value_t = 10.8)]
    pub charge_per_let: f64,
    /// Collection depth, um.
    #[arg(long, default_value_t = 1.0)]
    pub depth: f64,
    /// Collection efficiency at zero bias.
    #[arg(long, default_value_t = 0.3)]
    pub eta0: f64,
    /// Efficiency gain at vdd-ref.
    #[arg(long, default_value_t = 0.5)]
    pub eta1: f64,
    /// Reference bias for the efficiency slope, V.
    #[arg(long, default_value_t = 1.8)]
    pub vdd_ref: f64,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// LET values, MeV*cm^2/mg [default: 4,8,...,100].
    #[arg(long, alias = "let", value_delimiter = ',', num_args = 1..)]
    pub lets: Vec<f64>,
    /// Drain biases, V [default: 0,0.2,...,1.8].
    #[arg(long, alias = "vd", value_delimiter = ',', num_args = 1..)]
    pub vds: Vec<f64>,
    /// Adaptive time grid chord tolerance, fraction of pulse peak.
    #[arg(long, default_value_t = 1e-6)]
    pub max_rel_err: f64,
    /// Base sampling step before densification, s.
    #[arg(long, default_value_t = 1e-12)]
    pub base_step: f64,
    /// Waveform window length, s.
    #[arg(long, default_value_t = 1e-9)]
    pub t_stop: f64,
    /// Split shuffle seed.
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub out: OutDir,
    /// Dataset file name.
    #[arg(long, default_value = "dataset.csv")]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub oracle: OracleArgs,
}

#[derive(Debug, Clone, Args)]
pub struct LmArgs {
    #[arg(long, default_value_t = 1000)]
    pub epochs: usize,
    /// Rows in the fixed LM subsample; 0 uses the whole training split.
    #[arg(long, default_value_t = 4000)]
    pub lm_batch: usize,
    /// Weight initialization seed.
    #[arg(long, default_value_t = 1)]
    pub init_seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub mu_init: f64,
    #[arg(long, default_value_t = 10.0)]
    pub mu_factor: f64,
    #[arg(long, default_value_t = 1e10)]
    pub mu_max: f64,
    #[arg(long, default_value_t = 1e-7)]
    pub grad_tol: f64,
    /// Epochs without a new best validation MSE before stopping.
    #[arg(long, default_value_t = 6)]
    pub val_patience: usize,
}

fn parse_shape(s: &str) -> Result<String, String> {
    Architecture::parse(s, Transfer::Tansig).map(|_| s.to_string()).map_err(|e| e.to_string())
}

fn parse_hidden_transfer(s: &str) -> Result<Transfer, String> {
    let t: Transfer = s.parse().map_err(|e: MlpError| e.to_string())?;
    if t == Transfer::Purelin {
        return Err("hidden layers need a sigmoid transfer (tansig, logsig, elliotsig)".into());
    }
    Ok(t)
}

/// `<shape>:<transfer>`, e.g. `8x8x1:tansig`.
fn parse_arch_entry(s: &str) -> Result<Architecture, String> {
    let (shape, t) = s.split_once(':').ok_or_else(|| format!("expected <shape>:<transfer>, got `{s}`"))?;
    Architecture::parse(shape, parse_hidden_transfer(t)?).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutDir,
    /// Dataset CSV.
    #[arg(long, default_value = "dataset.csv")]
    pub dataset: PathBuf,
    /// Layer sizes ending in the output layer, e.g. 8x8x1.
    #[arg(long, default_value = "8x8x1", value_parser = parse_shape)]
    pub arch: String,
    #[arg(long, default_value = "tansig", value_parser = parse_hidden_transfer)]
    pub transfer: Transfer,
    #[command(flatten)]
    pub lm: LmArgs,
    /// Model file name.
    #[arg(long, default_value = "model.txt")]
    pub model: PathBuf,
    /// Per-epoch training report.
    #[arg(long, default_value = "train_report.csv")]
    pub report: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub out: OutDir,
    #[arg(long, default_value = "dataset.csv")]
    pub dataset: PathBuf,
    /// Comma-separated `<shape>:<transfer>` list [default: the nine-row
    /// 16x1, 8x8x1, 8x16x8x1 by tansig/logsig/elliotsig grid].
    #[arg(long, value_delimiter = ',', num_args = 1.., value_parser = parse_arch_entry)]
    pub archs: Vec<Architecture>,
    #[command(flatten)]
    pub lm: LmArgs,
    /// Order rows by test MSE (ties keep sweep order).
    #[arg(long)]
    pub sort: bool,
    /// Also write each trained model.
    #[arg(long)]
    pub save_models: bool,
    #[arg(long, default_value = "sweep.csv")]
    pub table: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub out: OutDir,
    #[arg(long, default_value = "model.txt")]
    pub model: PathBuf,
    #[arg(long, default_value = "set_source.va")]
    pub va: PathBuf,
    #[arg(long, default_value = "set_source")]
    pub module_name: String,
    /// Default strike time written into the module, s.
    #[arg(long, default_value_t = 200e-12)]
    pub t_strike: f64,
    /// Random points in the evaluate-vs-predict check; 0 skips it.
    #[arg(long, default_value_t = 1000)]
    pub check_points: usize,
    #[arg(long, default_value_t = 7)]
    pub check_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct CircuitArgs {
    /// LETs to strike with.
    #[arg(long, value_delimiter = ',', num_args = 1.., default_values_t = [5.0, 20.0, 40.0, 60.0, 80.0])]
    pub lets: Vec<f64>,
    /// Drain bias fed to the source: instant, prestrike, or a value in V.
    #[arg(long, default_value = "instant")]
    pub binding: String,
    #[arg(long, default_value_t = 200e-12)]
    pub t_strike: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub sim_stop: f64,
    #[arg(long, default_value_t = 1e-12)]
    pub dt: f64,
    #[arg(long, default_value_t = 1.8)]
    pub vdd: f64,
    #[arg(long, default_value_t = 5)]
    pub fanout: usize,
    /// Capacitance at every inverter output, F.
    #[arg(long, default_value_t = 5e-15)]
    pub load_cap: f64,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub out: OutDir,
    /// Trained model driving the SET source.
    #[arg(long, default_value = "model.txt", conflicts_with = "oracle")]
    pub model: PathBuf,
    /// Drive the SET source with the surrogate oracle instead of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Simulate this netlist file instead of the built-in chain.
    #[arg(long, conflicts_with_all = ["oracle"])]
    pub netlist: Option<PathBuf>,
    #[command(flatten)]
    pub circuit: CircuitArgs,
    /// Subdirectory for trace CSVs.
    #[arg(long, default_value = "traces")]
    pub traces: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub out: OutDir,
    #[command(flatten)]
    pub grid: GridArgs,
    #[arg(long, default_value = "8x8x1", value_parser = parse_shape)]
    pub arch: String,
    #[arg(long, default_value = "tansig", value_parser = parse_hidden_transfer)]
    pub transfer: Transfer,
    #[command(flatten)]
    pub lm: LmArgs,
    #[command(flatten)]
    pub circuit: CircuitArgs,
}

fn main() -> ExitCode {
    let argv = match config::expand_argv(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Usage(_) | CliError::Config { .. } => 2,
                _ => 1,
            })
        }
    }
}
