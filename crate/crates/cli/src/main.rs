//! `gesticulate`: prepare a corpus, train a gesture flow, sample motion from
//! speech, and evaluate the samples.

mod commands;
mod error;
mod workdir;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use gesticulate::config::PipelineConfig;

use commands::{Context, EvalArgs, EvalMode, PrepareArgs, SynthArgs, TrainArgs};
use error::CliError;
use workdir::Workdir;

#[derive(Debug, Parser)]
#[command(name = "gesticulate", version, about)]
struct Cli {
    /// TOML pipeline configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Working directory, overriding `paths.workdir`.
    #[arg(long, global = true, env = "GESTICULATE_WORKDIR")]
    workdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Align, split, mirror and standardize a corpus.
    Prepare {
        /// CSV manifest with columns id,bvh,wav.
        #[arg(long, conflicts_with = "toy")]
        manifest: Option<PathBuf>,
        /// Generate the synthetic corpus instead of reading files.
        #[arg(long)]
        toy: bool,
        /// Number of synthetic episodes.
        #[arg(long, requires = "toy")]
        episodes: Option<usize>,
    },
    /// Train on the prepared dataset.
    Train {
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps; the schedule still spans
        /// `train.steps`.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Sample pose sequences for a speech recording.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, allow_negative_numbers = true)]
        temperature: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gesture-space or hand-velocity peak analysis.
    Eval {
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample clips for this recording.
        #[arg(long, conflicts_with = "clips")]
        wav: Option<PathBuf>,
        /// Analyse existing BVH clips instead of sampling.
        #[arg(long)]
        clips: Option<PathBuf>,
        /// BVH clips to compare the gesture space against.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Number of sampled clips; defaults come from the config.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let (config, base) = match &cli.config {
        Some(p) => (
            PipelineConfig::load(p)?,
            p.parent().map(PathBuf::from).unwrap_or_default(),
        ),
        None => (PipelineConfig::default(), PathBuf::from(".")),
    };
    let workdir = cli
        .workdir
        .clone()
        .unwrap_or_else(|| base.join(&config.paths.workdir));
    Ok(Context {
        config,
        base,
        explicit: cli.config.is_some(),
        workdir: Workdir::new(workdir),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    let ctx = context(&cli)?;
    match cli.command {
        Command::Prepare { manifest, toy, episodes } => {
            commands::cmd_prepare(&ctx, &PrepareArgs { manifest, toy, episodes })
        }
        Command::Train { resume, until } => commands::cmd_train(&ctx, &TrainArgs { resume, until }),
        Command::Synth {
            checkpoint,
            wav,
            n,
            seed,
            temperature,
            out,
        } => commands::cmd_synth(
            &ctx,
            &SynthArgs {
                checkpoint,
                wav,
                n,
                seed,
                temperature,
                out,
            },
        ),
        Command::Eval {
            mode,
            checkpoint,
            wav,
            clips,
            reference,
            samples,
            seed,
            out,
        } => commands::cmd_eval(
            &ctx,
            &EvalArgs {
                mode,
                checkpoint,
                wav,
                clips,
                reference,
                samples,
                seed,
                out,
            },
        ),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
