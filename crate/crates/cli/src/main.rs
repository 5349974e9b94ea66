use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

/// Rolling flow matching for joint audio-video generation on a toy corpus.
#[derive(Debug, Parser)]
#[command(name = "rflav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// `key = value` run configuration; unset keys keep their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate toy clips from a manifest of `class,seed,length` lines.
    Dataset {
        /// Manifest file. Without it, a default manifest of `--count` clips is
        /// written to the output directory and used.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        length: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train on every clip in a directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Metrics log (`step,loss_v,loss_a`); defaults to `<out>.metrics.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Write the checkpoint every N steps as well as at the end.
        #[arg(long)]
        save_every: Option<u64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Stream frames from a trained checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, short = 'n')]
        frames: usize,
        /// Solver steps per frame lifetime (multiple of the window).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        class: Option<usize>,
        /// Clamp audio to this clip and generate video.
        #[arg(long, conflicts_with = "v2a")]
        a2v: Option<PathBuf>,
        /// Clamp video to this clip and generate audio.
        #[arg(long)]
        v2a: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Loop detection and feature drift for a clip or a directory of clips.
    Analyze {
        path: PathBuf,
        #[arg(long = "loop")]
        loops: bool,
        #[arg(long)]
        drift: bool,
        #[arg(long)]
        threshold: Option<f64>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Gradient checks, schedule invariants, oracle sampler and causality.
    Check,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(commands::EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Dataset { manifest, count, length, out, config } => {
            commands::dataset(config.config.as_deref(), manifest.as_deref(), count, length, &out)
        }
        Command::Train { data, out, resume, log, save_every, config } => commands::train(commands::TrainArgs {
            config: config.config,
            data,
            out,
            resume,
            log,
            save_every,
        }),
        Command::Generate { checkpoint, frames, steps, seed, class, a2v, v2a, out, config } => {
            commands::generate(commands::GenerateArgs {
                config: config.config,
                checkpoint,
                frames,
                steps,
                seed,
                class,
                a2v,
                v2a,
                out,
            })
        }
        Command::Analyze { path, loops, drift, threshold, config } => {
            commands::analyze(config.config.as_deref(), &path, loops, drift, threshold)
        }
        Command::Check => commands::check(),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
