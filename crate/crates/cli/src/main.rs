//! `sshp`: simulate, fit, predict, evaluate and cluster from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

/// Bad flags, config keys or argument values (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "sshp", version, about = "Stimuli-sensitive Hawkes processes for student activity data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: CommonArgs,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// JSON run configuration; flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(short, long, global = true, default_value = "out")]
    output: PathBuf,
    /// Override any config key, e.g. `--set hyper.rho=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// More logging on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic course and write it as CSV plus ground truth.
    Simulate(SimulateArgs),
    /// Fit a model to a dataset.
    Fit(FitArgs),
    /// Predict the next arrivals of every student-assignment pair.
    Predict(PredictArgs),
    /// Split, fit (unless a model is given), predict and score.
    Evaluate(EvaluateArgs),
    /// Cluster fitted pair parameters and test grades across clusters.
    Cluster(ClusterArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    students: Option<usize>,
    #[arg(long)]
    assignments: Option<usize>,
    /// Fraction of pairs masked out of the observed data.
    #[arg(long)]
    mask: Option<f64>,
    /// Rank of the generating matrices.
    #[arg(long)]
    rank: Option<usize>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    events: Option<PathBuf>,
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long)]
    grades: Option<PathBuf>,
    /// Held-out sequences scored as completely missing (evaluate only).
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Course end in hours.
    #[arg(long)]
    course_end: Option<f64>,
}

#[derive(Debug, Args)]
struct HyperArgs {
    #[arg(long)]
    beta: Option<f64>,
    /// Time scale in hours.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    /// Components to remove: any of s, o, h, d.
    #[arg(long)]
    ablate: Option<String>,
}

#[derive(Debug, Args)]
struct PredictionArgs {
    /// Monte Carlo trials per predicted arrival.
    #[arg(long)]
    n_trials: Option<usize>,
    /// Arrivals predicted per pair.
    #[arg(long)]
    z_max: Option<usize>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Fit only the training part of the evaluation split.
    #[arg(long)]
    on_split: bool,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    prediction: PredictionArgs,
    /// Fitted model (model.json).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    prediction: PredictionArgs,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ClusterArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Fixed number of clusters (default: elbow).
    #[arg(short)]
    k: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
}

fn push<T: serde::Serialize>(out: &mut Vec<(String, Value)>, key: &str, value: &Option<T>) {
    if let Some(v) = value {
        out.push((key.to_string(), serde_json::to_value(v).expect("flag values serialize")));
    }
}

impl DataArgs {
    fn overrides(&self, out: &mut Vec<(String, Value)>) {
        push(out, "data.events", &self.events);
        push(out, "data.assignments", &self.assignments);
        push(out, "data.grades", &self.grades);
        push(out, "data.heldout", &self.heldout);
        push(out, "data.course_end_hours", &self.course_end);
    }
}

impl HyperArgs {
    fn overrides(&self, out: &mut Vec<(String, Value)>) {
        push(out, "hyper.beta", &self.beta);
        push(out, "hyper.s", &self.scale);
        push(out, "hyper.gamma0", &self.gamma0);
        push(out, "hyper.eta", &self.eta);
        push(out, "hyper.rho", &self.rho);
        push(out, "hyper.max_iter", &self.max_iter);
        push(out, "ablate", &self.ablate);
    }
}

impl PredictionArgs {
    fn overrides(&self, out: &mut Vec<(String, Value)>) {
        push(out, "hyper.n_trials", &self.n_trials);
        push(out, "hyper.z_max", &self.z_max);
    }
}

impl SplitArgs {
    fn overrides(&self, out: &mut Vec<(String, Value)>) {
        push(out, "split.holdout_fraction", &self.holdout);
        push(out, "split.train_fraction", &self.train_fraction);
    }
}

impl Command {
    fn overrides(&self) -> Vec<(String, Value)> {
        let mut out = Vec::new();
        match self {
            Command::Simulate(a) => {
                push(&mut out, "synthetic.students", &a.students);
                push(&mut out, "synthetic.assignments", &a.assignments);
                push(&mut out, "synthetic.mask_fraction", &a.mask);
                push(&mut out, "synthetic.matrix_rank", &a.rank);
            }
            Command::Fit(a) => {
                a.data.overrides(&mut out);
                a.hyper.overrides(&mut out);
                a.split.overrides(&mut out);
                if a.on_split {
                    out.push(("fit_on_split".into(), Value::Bool(true)));
                }
            }
            Command::Predict(a) => {
                a.data.overrides(&mut out);
                a.prediction.overrides(&mut out);
                push(&mut out, "model", &a.model);
            }
            Command::Evaluate(a) => {
                a.data.overrides(&mut out);
                a.hyper.overrides(&mut out);
                a.split.overrides(&mut out);
                a.prediction.overrides(&mut out);
                push(&mut out, "model", &a.model);
            }
            Command::Cluster(a) => {
                a.data.overrides(&mut out);
                a.hyper.overrides(&mut out);
                push(&mut out, "model", &a.model);
                push(&mut out, "cluster.k", &a.k);
                push(&mut out, "cluster.restarts", &a.restarts);
            }
        }
        out
    }
}

/// Maps a failure onto the documented exit codes.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<sshp::Error>() {
            return if e.is_numerical() {
                3
            } else if e.is_data_error() {
                2
            } else {
                1
            };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut overrides = cli.command.overrides();
    if let Some(seed) = cli.common.seed {
        overrides.push(("seed".into(), Value::from(seed)));
    }
    for raw in &cli.common.set {
        overrides.push(config::parse_assignment(raw)?);
    }
    let cfg = config::resolve(cli.common.config.as_deref(), &overrides)?;

    if let Some(n) = cli.common.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| UsageError(format!("thread pool: {e}")))?;
    }

    let out = &cli.common.output;
    match cli.command {
        Command::Simulate(_) => commands::simulate(&cfg, out),
        Command::Fit(_) => commands::fit(&cfg, out),
        Command::Predict(_) => commands::predict(&cfg, out),
        Command::Evaluate(_) => commands::evaluate(&cfg, out),
        Command::Cluster(_) => commands::cluster(&cfg, out),
    }
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
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
