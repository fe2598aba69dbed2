//! `svs-aug` command-line pipeline: corpus preparation, offline pitch
//! augmentation, training, synthesis and objective evaluation.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

pub use config::{DataConfig, RunConfig, Toggles};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "svs-aug", version, about = "Singing voice synthesis with pitch and mix-up augmentation")]
pub struct Cli {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for training, and the default output of evaluation.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Segment songs into phrases, extract features and write a manifest.
    Prepare {
        /// Directory of `<song>.wav` + `<song>.lab` pairs.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Materialize pitch-shifted copies of the training phrases.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to the manifest's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train (or resume training) into the run directory.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in total.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Synthesize label files with a checkpoint.
    Synth {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A `.lab` file or a directory of them.
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for eval_report.json; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the ground truth against itself.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
    },
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

/// Executes a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let config = resolve_config(cli)?;
    let check_hash = cli.config.is_some();
    match &cli.command {
        Command::Prepare { corpus, out } => {
            let corpus = corpus
                .clone()
                .or_else(|| config.data.corpus_dir.clone())
                .ok_or_else(|| CliError::usage("no corpus directory given"))?;
            commands::prepare(&corpus, out, &config)?;
        }
        Command::Augment { manifest, out } => {
            let out = out
                .clone()
                .unwrap_or_else(|| manifest.parent().map(PathBuf::from).unwrap_or_default());
            commands::augment(manifest, &out, &config)?;
        }
        Command::Train {
            manifest,
            resume,
            stop_after,
        } => {
            let run_dir = cli
                .run_dir
                .as_ref()
                .ok_or_else(|| CliError::usage("train needs --run-dir"))?;
            let options = commands::TrainOptions {
                manifest: manifest.clone(),
                resume: *resume,
                stop_after: *stop_after,
            };
            let s = commands::train(run_dir, &config, &options)?;
            println!(
                "epoch {}: initial validation {:.6}, best {:.6} at epoch {}",
                s.final_epoch,
                s.initial_valid,
                s.best_valid.unwrap_or(f64::NAN),
                s.best_epoch.unwrap_or(0)
            );
        }
        Command::Synth {
            checkpoint,
            scores,
            out,
        } => {
            commands::synth(checkpoint, scores, out, &config, check_hash)?;
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            oracle,
        } => {
            let out = out
                .clone()
                .or_else(|| cli.run_dir.clone())
                .ok_or_else(|| CliError::usage("eval needs --out or --run-dir"))?;
            let source = match checkpoint {
                Some(path) if !oracle => commands::EvalSource::Checkpoint { path, check_hash },
                _ => commands::EvalSource::Oracle,
            };
            let report = commands::eval(manifest, source, &out, &config)?;
            println!("{}", serde_json::to_string(&report.summary)?);
        }
    }
    Ok(())
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
