//! `hjb`: train, query and check policy-iteration operators.

mod commands;
mod inputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "hjb", version, about = "Policy iteration for HJB equations with operator networks")]
struct Cli {
    /// Cap on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Root for run directories when `--out` is not given.
    #[arg(long, global = true, env = "HJB_OUTPUT_ROOT", default_value = "runs")]
    output_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run policy iteration and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained operator on a new terminal function.
    Infer(InferArgs),
    /// Closed-loop rollout driven by a trained operator.
    Synthesize(SynthesizeArgs),
    /// Compare a trained operator against a reference solution.
    Compare(CompareArgs),
    /// Grid policy iteration on a problem with d <= 2.
    GridSolve(GridSolveArgs),
    /// Evaluate a reference solution directly.
    Oracle(OracleArgs),
    /// List the built-in problems.
    Catalog,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    problem: Option<String>,
    /// TOML run configuration; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the desk-scale preset (the default).
    #[arg(long, conflicts_with = "paper_scale")]
    desk_scale: bool,
    /// Use the reference-scale network and schedule.
    #[arg(long)]
    paper_scale: bool,
    /// Seed for network initialization and collocation sampling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Run directory; must not exist.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    run: PathBuf,
    /// `a + b*|x|^2`-style expression or a file of sensor values.
    #[arg(long)]
    g: String,
    /// CSV with header `t,x1,...,xd`.
    #[arg(long)]
    points: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    g: String,
    /// Initial state, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Vec<f64>,
    /// Rollout step; the configured value or T/100 when omitted.
    #[arg(long)]
    dt: Option<f64>,
    /// Output directory; must not exist.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    Grid,
    Transcription,
    Hopflax,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, value_enum)]
    oracle: OracleKind,
    #[arg(long)]
    g: String,
    /// Number of uniform probes in the central 75% of the working box.
    #[arg(long, default_value_t = 200)]
    probes: usize,
    /// CSV with header `t,x1,...,xd`; replaces the uniform probes.
    #[arg(long)]
    points: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid spacing of the grid oracle.
    #[arg(long, default_value_t = 0.05)]
    grid_h: f64,
    /// Control steps of the transcription oracle.
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridSolveArgs {
    #[arg(long)]
    problem: String,
    #[arg(long, default_value_t = 0.05)]
    h: f64,
    #[arg(long, default_value_t = 1.0)]
    viscosity: f64,
    #[arg(long, default_value_t = 5)]
    iterations: usize,
    /// Terminal function; the problem's reference terminal when omitted.
    #[arg(long)]
    g: Option<String>,
    /// Output directory; must not exist.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long)]
    problem: String,
    #[arg(long, value_enum)]
    kind: OracleKind,
    #[arg(long)]
    g: Option<String>,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x0: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    t: f64,
    #[arg(long, default_value_t = 50)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    grid_h: f64,
    /// Trajectory CSV for the transcription oracle.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Train(a) => commands::train(&cli.output_root, a),
        Command::Infer(a) => commands::infer(a),
        Command::Synthesize(a) => commands::synthesize(a),
        Command::Compare(a) => commands::compare(a),
        Command::GridSolve(a) => commands::grid_solve(a),
        Command::Oracle(a) => commands::oracle(a),
        Command::Catalog => commands::catalog(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = commands::exit_code(&e);
            eprintln!("{}", commands::error_record(&e, code));
            ExitCode::from(code)
        }
    }
}
