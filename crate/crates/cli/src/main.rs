mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tlmest", version, about = "Transfer-learning M-estimation: pooling, fine-tuning and source selection")]
pub struct Cli {
    /// Exit with status 2 when a solver reports non-convergence.
    #[arg(long, global = true)]
    pub strict: bool,

    /// Worker threads for experiment replications.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed (overrides TLMEST_SEED and the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Simulate a study and write its datasets and study.json.
    Generate(GenerateArgs),
    /// Penalized fit on a single dataset.
    Fit(FitArgs),
    /// Pool datasets and optionally fine-tune on the target.
    Transfer(TransferArgs),
    /// Joint truncated-penalty estimation with source selection.
    Select(SelectArgs),
    /// Run a named preset or a configured experiment to CSV and JSON.
    Experiment(ExperimentArgs),
    /// Aggregate record CSVs.
    Report(ReportArgs),
}

#[derive(Args, Debug, Default)]
pub struct DataArgs {
    /// Study directory or study.json; datasets are read target first.
    #[arg(long)]
    pub study: Option<PathBuf>,

    /// Dataset files (.csv or .tlmx), target first.
    #[arg(long = "data", num_args = 1..)]
    pub files: Vec<PathBuf>,

    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FamilyArg {
    Linear,
    Logit,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegularizerArg {
    L1,
    Nuclear,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Take the scenario from a preset instead of the config.
    #[arg(long)]
    pub preset: Option<String>,

    /// Scenario id within the preset (default: its first scenario).
    #[arg(long)]
    pub scenario: Option<String>,

    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Dataset index within the study or file list.
    #[arg(long, default_value_t = 0)]
    pub index: usize,

    #[arg(long, value_enum)]
    pub regularizer: Option<RegularizerArg>,

    /// Penalty level; cross-validated when absent.
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Output JSON (stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FinetuneArg {
    None,
    Lagrangian,
    Constrained,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Pool only the target and the study's truly informative sources.
    #[arg(long)]
    pub oracle: bool,

    #[arg(long, value_enum)]
    pub regularizer: Option<RegularizerArg>,

    #[arg(long)]
    pub lambda_pool: Option<f64>,

    #[arg(long, value_enum)]
    pub finetune: Option<FinetuneArg>,

    /// Lagrangian fine-tuning penalty.
    #[arg(long)]
    pub zeta: Option<f64>,

    /// Constrained fine-tuning radius.
    #[arg(long)]
    pub radius: Option<f64>,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long, value_enum)]
    pub regularizer: Option<RegularizerArg>,

    #[arg(long)]
    pub lambda_pool: Option<f64>,

    /// Contrast penalty applied to every source.
    #[arg(long)]
    pub lambda_q: Option<f64>,

    #[arg(long)]
    pub tau: Option<f64>,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Named preset, e.g. table2-desk.
    #[arg(long)]
    pub preset: Option<String>,

    #[arg(long)]
    pub replications: Option<usize>,

    /// Record wall time per estimator (output is then run-dependent).
    #[arg(long)]
    pub timing: bool,

    /// Output directory for records.csv, summary.json and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// List preset names and exit.
    #[arg(long)]
    pub list: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Record CSVs written by `experiment`.
    #[arg(required = true, num_args = 1..)]
    pub records: Vec<PathBuf>,

    /// Add best-estimator frequencies per scenario.
    #[arg(long)]
    pub frequencies: bool,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(status) if !status.converged => {
            for note in &status.notes {
                log::warn!("{note}");
            }
            if cli.strict {
                eprintln!("error: solver did not converge");
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            }
        }
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
