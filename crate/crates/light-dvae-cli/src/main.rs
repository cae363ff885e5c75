//! Command-line pipeline for the speech spectrogram models: preprocess,
//! train, resynthesize, generate, evaluate and inspect.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (non-finite loss, failed gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use light_dvae::error::Error;
use light_dvae::model::Mode;

use config::{FileConfig, Overrides};

#[derive(Parser)]
#[command(name = "light-dvae", version, about = "Transformer dynamical VAEs for speech power spectrograms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a directory of 16 kHz mono WAV files.
    Train {
        /// Corpus directory (scanned recursively for .wav).
        #[arg(long)]
        data: PathBuf,
        /// Output directory (checkpoints/, logs/, config echo).
        #[arg(long)]
        out: PathBuf,
        /// TOML configuration file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Resynthesize utterances through a trained model.
    Resynth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// WAV file or directory of WAV files.
        #[arg(long)]
        input: PathBuf,
        /// Decoder feedback: tf (ground truth) or gen (own outputs).
        #[arg(long, default_value = "tf")]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample new spectrograms and reconstruct waveforms with Griffin-Lim.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of utterances to sample.
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Length of each sample in STFT frames.
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Griffin-Lim iterations.
        #[arg(long, default_value_t = 100)]
        gl_iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics for reference/estimate WAV pairs (files or directories,
    /// paired in sorted order).
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
        /// STFT window for the log-spectral distance.
        #[arg(long, default_value_t = 1024)]
        window: usize,
        #[arg(long, default_value_t = 256)]
        hop: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a deterministic synthetic harmonic corpus.
    SynthData {
        #[arg(long, default_value_t = 200)]
        count: usize,
        /// Duration of each utterance in seconds.
        #[arg(long, default_value_t = 2.0)]
        secs: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-module parameter counts for a config or checkpoint.
    Params {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also report another variant at the same config and the
        /// difference.
        #[arg(long)]
        versus: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Finite-difference verification of every differentiable block and
    /// the full training loss on a tiny configuration.
    Gradcheck {
        #[arg(long, default_value_t = 5e-3)]
        block_eps: f64,
        #[arg(long, default_value_t = 1e-3)]
        elbo_eps: f64,
    },
}

fn load_config(path: Option<&PathBuf>, overrides: &Overrides) -> Result<FileConfig, Error> {
    let mut cfg = match path {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    overrides.apply(&mut cfg);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            data,
            out,
            config,
            overrides,
        } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            commands::train(&cfg, &data, &out)
        }
        Command::Resynth {
            checkpoint,
            input,
            mode,
            seed,
            out,
        } => {
            let mode: Mode = mode.parse()?;
            commands::resynth(&checkpoint, &input, mode, seed, &out)
        }
        Command::Generate {
            checkpoint,
            count,
            frames,
            gl_iters,
            seed,
            out,
        } => commands::generate(&checkpoint, count, frames, gl_iters, seed, &out),
        Command::Eval {
            reference,
            estimate,
            window,
            hop,
            out,
        } => commands::eval(&reference, &estimate, window, hop, &out),
        Command::SynthData {
            count,
            secs,
            seed,
            out,
        } => commands::synth_data(count, secs, seed, &out),
        Command::Params {
            checkpoint,
            config,
            versus,
            overrides,
        } => {
            let cfg = load_config(config.as_ref(), &overrides)?;
            commands::params(&cfg, checkpoint.as_deref(), versus.as_deref())
        }
        Command::Gradcheck {
            block_eps,
            elbo_eps,
        } => commands::gradcheck(block_eps, elbo_eps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version requests are not errors.
            if e.use_stderr() {
                eprint!("{e}");
                return ExitCode::from(1);
            }
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::NonFiniteLoss { .. } | Error::Numerical(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
