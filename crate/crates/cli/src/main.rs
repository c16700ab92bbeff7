//! `focuscir`: preprocess, train, evaluate, retrieve, sweep and generate
//! synthetic data from the command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "focuscir", version = focuscir::BUILD_ID, about = "Composed image retrieval with focus mapping")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Config file of `key=value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one setting; applied after the config file. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory for this command's artifacts.
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for preprocessing and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, global = true, value_parser = ["full", "stub"])]
    pub profile: Option<String>,
    /// Ablation flag such as `no_VFM`. Repeatable.
    #[arg(long = "ablate", global = true, value_name = "FLAG")]
    pub ablate: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Dataset manifest: a directory for `synthetic`, the dataset root otherwise.
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// One of synthetic, fashioniq, shoes, cirr.
    #[arg(long, default_value = "synthetic")]
    pub format: String,
    /// Preprocessing cache; defaults to `cache` beside the manifest.
    #[arg(long, value_name = "DIR")]
    pub cache: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Caption and segment every image, caching records and features.
    Preprocess {
        #[command(flatten)]
        data: DataArgs,
    },
    /// Fit the model on the train split, validating after each epoch.
    Train {
        #[command(flatten)]
        data: DataArgs,
        /// Continue from `checkpoint-last.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Rank a split's gallery for every query and write metrics and reports.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint file, or a training directory holding `checkpoint-best.ckpt`.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Ranked ids kept per query in `rankings.jsonl`.
        #[arg(long, default_value_t = 50)]
        top_k: usize,
    },
    /// Top-k gallery ids for one reference image and modification text.
    Retrieve {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Image id from the manifest, or a path to an image file.
        #[arg(long)]
        image: String,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Split whose gallery is searched.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate once per value of one setting, then plot the metrics.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        /// Setting name as accepted by `--set`, e.g. `P` or `mu`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Write a synthetic dataset to the output directory.
    GenSynth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let g = &cli.global;
    let result = match cli.command {
        Command::Preprocess { data } => commands::preprocess(g, &data),
        Command::Train { data, resume } => commands::train(g, &data, resume),
        Command::Eval {
            data,
            checkpoint,
            split,
            top_k,
        } => commands::eval(g, &data, &checkpoint, &split, top_k),
        Command::Retrieve {
            data,
            checkpoint,
            image,
            text,
            k,
            split,
        } => commands::retrieve(g, &data, &checkpoint, &image, &text, k, &split),
        Command::Sweep {
            data,
            param,
            values,
            split,
        } => commands::sweep(g, &data, &param, &values, &split),
        Command::GenSynth { n, noise } => commands::gen_synth(g, n, noise),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
