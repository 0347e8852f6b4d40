//! `racer`: train, evaluate and sweep budget-constrained judge routers.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use racer_core::evalbench::{BaselineKind, Method};
use racer_core::metrics::EvalMode;
use racer_core::reweight::{RobustMode, Temperature};
use racer_core::trainer::{DualSchedule, OptimizerKind, PolicyKind};

#[derive(Debug, Parser)]
#[command(name = "racer", version, about = "Budget-constrained routing between reasoning and instruct judges")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a router on a labelled dataset.
    Train(TrainArgs),
    /// Evaluate a trained model or a constant baseline.
    Eval(EvalArgs),
    /// Train and evaluate every method over a grid of budgets and seeds.
    Sweep(SweepArgs),
    /// Run the exact primal-dual iteration on a tabular problem and check its bound.
    SaddleDemo(SaddleArgs),
    /// Write synthetic datasets drawn from a scenario file.
    GenSynth(GenSynthArgs),
    /// Write per-instance tilt weights for a dataset under a policy.
    InspectWeights(InspectArgs),
}

/// Training hyper-parameters shared by `train` and `sweep`. Unset flags fall
/// back to the config file, then to built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Reward tilt temperature (`inf` disables).
    #[arg(long)]
    pub tau_r: Option<Temperature>,
    /// Cost tilt temperature (`inf` disables).
    #[arg(long)]
    pub tau_c: Option<Temperature>,
    /// racer, racer-r, racer-c or acer.
    #[arg(long)]
    pub mode: Option<RobustMode>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Primal learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dual_lr: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// linear, mlp or mlp:W1,W2,...
    #[arg(long)]
    pub policy: Option<PolicyKind>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long, value_parser = parse_schedule)]
    pub dual_schedule: Option<DualSchedule>,
    /// TOML or JSON config; a run manifest works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("policy_source").required(true).args(["model", "baseline"])))]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// all-instruct, all-reasoning or random:<p>.
    #[arg(long)]
    pub baseline: Option<BaselineKind>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "expected")]
    pub mode: EvalMode,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["scenario", "train_data"])))]
pub struct SweepArgs {
    /// Scenario file; the training split and test splits are generated from it.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    /// Training dataset.
    #[arg(long = "train")]
    pub train_data: Option<PathBuf>,
    /// Test split as NAME=PATH; repeatable.
    #[arg(long = "test", value_parser = parse_named_path)]
    pub tests: Vec<(String, PathBuf)>,
    /// Comma-separated budgets.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<f64>>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<Method>>,
    /// First seed; repeats use consecutive seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_mode: Option<EvalMode>,
    /// Worker threads; 0 uses all cores.
    #[arg(long, env = "RACER_WORKERS", default_value_t = 0)]
    pub workers: usize,
    /// Reuse cell results whose digests match.
    #[arg(long)]
    pub resume: bool,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct SaddleArgs {
    /// Load the problem from JSON instead of drawing one.
    #[arg(long, conflicts_with_all = ["contexts", "max_cost", "max_weight"])]
    pub problem: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub contexts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overrides the loaded or drawn problem's value.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Overrides the loaded or drawn problem's budget.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub max_cost: f64,
    #[arg(long, default_value_t = 1.0)]
    pub max_weight: f64,
    /// Initial multiplier, or `star` to start at the solution.
    #[arg(long, default_value = "0", value_parser = parse_lambda0)]
    pub lambda0: Lambda0,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value = "saddle")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum Lambda0 {
    Value(f64),
    Star,
}

#[derive(Debug, Args)]
pub struct GenSynthArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// jsonl or csv.
    #[arg(long, default_value = "jsonl", value_parser = ["jsonl", "csv"])]
    pub format: String,
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model whose policy sets the expected reward and cost; a uniform policy otherwise.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub tau_r: Option<Temperature>,
    #[arg(long)]
    pub tau_c: Option<Temperature>,
    #[arg(long, default_value = "weights")]
    pub out: PathBuf,
}

fn parse_named_path(s: &str) -> Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or_else(|| format!("expected NAME=PATH, got `{s}`"))?;
    if name.is_empty() || path.is_empty() {
        return Err(format!("expected NAME=PATH, got `{s}`"));
    }
    Ok((name.to_string(), PathBuf::from(path)))
}

fn parse_lambda0(s: &str) -> Result<Lambda0, String> {
    if s == "star" {
        return Ok(Lambda0::Star);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(Lambda0::Value(v)),
        _ => Err(format!("expected a non-negative number or `star`, got `{s}`")),
    }
}

fn parse_schedule(s: &str) -> Result<DualSchedule, String> {
    match s {
        "per-batch" | "per_batch" => Ok(DualSchedule::PerBatch),
        "per-epoch" | "per_epoch" => Ok(DualSchedule::PerEpoch),
        other => Err(format!("unknown dual schedule `{other}`")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::SaddleDemo(a) => commands::saddle_demo(a),
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::InspectWeights(a) => commands::inspect_weights(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
