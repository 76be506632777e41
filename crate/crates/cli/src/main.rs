//! `tamperloc` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tamperloc::network::Profile;

use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "tamperloc", version, about = "Pixel-level image tamper localization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Network size: full or desk.
    #[arg(long, global = true)]
    profile: Option<Profile>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Model checkpoint (written by train, read by predict).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Splice segmented objects into corner crops of host images.
    Synth(commands::SynthArgs),
    /// Dump per-patch resampling features of images.
    Features(commands::FeaturesArgs),
    /// Train a model on a manifest.
    Train(commands::TrainArgs),
    /// Write probability maps and masks for images.
    Predict(commands::PredictArgs),
    /// Score saved predictions against ground-truth masks.
    Eval(commands::EvalArgs),
    /// Print the Hilbert ordering of a 2^k grid as CSV.
    Hilbert(commands::HilbertArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let g = cli.global;
    let run = RunConfig::resolve(
        g.config.as_deref(),
        Overrides {
            profile: g.profile,
            seed: g.seed,
            jobs: g.jobs,
            checkpoint: g.checkpoint,
            out: g.out,
        },
    )
    .and_then(|run| {
        if let Some(j) = run.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build_global()
                .map_err(|e| tamperloc::Error::State(format!("thread pool: {e}")))?;
        }
        Ok(run)
    });
    let result = run.and_then(|run| match cli.command {
        Command::Synth(a) => commands::synth(&run, a),
        Command::Features(a) => commands::features(&run, a),
        Command::Train(a) => commands::train(&run, a),
        Command::Predict(a) => commands::predict(&run, a),
        Command::Eval(a) => commands::eval(&run, a),
        Command::Hilbert(a) => commands::hilbert(a),
        Command::Gradcheck => commands::gradcheck(&run),
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
