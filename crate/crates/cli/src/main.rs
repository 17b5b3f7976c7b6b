use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod error;

#[derive(Debug, Parser)]
#[command(name = "gaitgl", version, about = "Gait recognition with global and local 3D-convolutional features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic walker dataset in the standard directory layout.
    Synth(SynthArgs),
    /// Train a model; writes config.txt, metrics.tsv and checkpoints to the run directory.
    Train(TrainArgs),
    /// Embed gallery and probe sequences with a checkpoint and write cross-view tables.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Write sample complementary mask pairs as grayscale PNGs.
    MaskDemo(MaskDemoArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of subjects.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub ids: u32,
    /// Sequences per subject.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub seqs: u32,
    #[arg(long, default_value_t = 30, value_parser = clap::value_parser!(u32).range(1..))]
    pub frames: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Dataset root directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Configuration sources shared by `train` and `eval`.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=1e-3`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Checkpoint whose weights are evaluated.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sequence numbers forming the gallery, e.g. `1-4`.
    #[arg(long, default_value = "all")]
    pub gallery_seqs: config::SeqRange,
    /// Sequence numbers used as probes, e.g. `5-6`.
    #[arg(long, default_value = "all")]
    pub probe_seqs: config::SeqRange,
    /// Keep gallery entries recorded at the probe's own view.
    #[arg(long)]
    pub include_identical_view: bool,
    /// Output directory; defaults to the configured run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only run checks whose name starts with this.
    #[arg(long)]
    pub op: Option<String>,
    /// Central-difference step.
    #[arg(long, default_value_t = gaitgl::gradsuite::DEFAULT_EPS)]
    pub eps: f64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = gaitgl::gradsuite::DEFAULT_TOL)]
    pub tol: f64,
    /// Break the backward rule of the named tape op (negative control).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct MaskDemoArgs {
    /// Directory for the PNG files.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 44)]
    pub width: usize,
    /// Dropping ratios to sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.3,0.5,0.7")]
    pub ratios: Vec<f64>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::MaskDemo(a) => commands::mask_demo(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
