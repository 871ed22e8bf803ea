//! `lunit`: train and evaluate LU-CNNs on synthetic data, smooth clouds by
//! mean curvature flow, probe LU curvature, and run LU ablations.
//!
//! Every failure ends the process with a nonzero status and one stderr line
//! of the form `lunit-error: <code>: <message>`.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Environment variable bounding how many ablation cells train at once.
pub const THREADS_ENV: &str = "LUNIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "lunit", version, about = "Laplacian Unit point-cloud networks")]
struct Cli {
    /// Floating-point precision for network commands.
    #[arg(long, value_enum, global = true, default_value_t = Precision::F32)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Classification,
    Segmentation,
}

impl From<TaskArg> for lunit::networks::Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Classification => lunit::networks::Task::Classification,
            TaskArg::Segmentation => lunit::networks::Task::Segmentation,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML experiment config; defaults for --task when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Task whose defaults apply when no config file is given.
    #[arg(long, value_enum, default_value_t = TaskArg::Classification)]
    pub task: TaskArg,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value` or `section.key=value` config overrides.
    #[arg(long, num_args = 1..)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on the configured synthetic dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output_dir: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Voting rounds (defaults to `train.voting_rounds`).
        #[arg(long)]
        voting: Option<usize>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Smooth a cloud by explicit mean curvature flow.
    Flow {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = lunit::laplace::DEFAULT_FLOW_STEP)]
        step: f64,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
        #[arg(long, default_value_t = 16)]
        k: usize,
        /// Output format (xyz, ply, csv); inferred from the extension when omitted.
        #[arg(long)]
        format: Option<String>,
    },
    /// Write curvature maps around the LU at one resolution level.
    Curvature {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cloud to probe; the first synthetic test sample when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Resolution level: 0 is the input (decoder LU), 1-5 the encoder stages.
        #[arg(long, default_value_t = 0)]
        stage: usize,
        #[arg(long)]
        output_dir: PathBuf,
        /// Format of the colored cloud files.
        #[arg(long, default_value = "ply")]
        format: String,
    },
    /// Train LU variants with shared seeds and tabulate them.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        output_dir: PathBuf,
        /// Presets A-J as a comma list, or one of all, mt, fusion, neighbors.
        #[arg(long, default_value = "A,D")]
        grid: String,
        /// Comma-separated training seeds shared by every variant.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Print the default config for a task.
    Gencfg {
        #[arg(long, value_enum, default_value_t = TaskArg::Classification)]
        task: TaskArg,
        /// Write to a file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn threads() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let threads = threads()?;
    let p = cli.precision;
    match cli.command {
        Command::Train { cfg, output_dir } => match p {
            Precision::F32 => commands::train::<f32>(&cfg, &output_dir, threads),
            Precision::F64 => commands::train::<f64>(&cfg, &output_dir, threads),
        },
        Command::Eval {
            cfg,
            checkpoint,
            voting,
            output_dir,
        } => match p {
            Precision::F32 => commands::eval::<f32>(&cfg, &checkpoint, voting, output_dir.as_deref(), threads),
            Precision::F64 => commands::eval::<f64>(&cfg, &checkpoint, voting, output_dir.as_deref(), threads),
        },
        Command::Flow {
            input,
            output,
            step,
            iterations,
            k,
            format,
        } => commands::flow(&input, &output, step, iterations, k, format.as_deref(), threads),
        Command::Curvature {
            cfg,
            checkpoint,
            input,
            stage,
            output_dir,
            format,
        } => {
            let args = commands::CurvatureArgs {
                checkpoint: &checkpoint,
                input: input.as_deref(),
                stage,
                output_dir: &output_dir,
                format: &format,
            };
            match p {
                Precision::F32 => commands::curvature::<f32>(&cfg, &args, threads),
                Precision::F64 => commands::curvature::<f64>(&cfg, &args, threads),
            }
        }
        Command::Ablate {
            cfg,
            output_dir,
            grid,
            seeds,
        } => match p {
            Precision::F32 => commands::ablate::<f32>(&cfg, &output_dir, &grid, seeds.as_deref(), threads),
            Precision::F64 => commands::ablate::<f64>(&cfg, &output_dir, &grid, seeds.as_deref(), threads),
        },
        Command::Gencfg { task, output } => commands::gencfg(task.into(), output.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("lunit-error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("lunit-error: {}: {}", e.code(), msg);
            ExitCode::FAILURE
        }
    }
}
