//! `gda`: the CSI generative-augmentation pipeline as subcommands.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::config::{Overrides, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "gda",
    version,
    about = "CSI gesture data augmentation with a conditional diffusion model"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; every key is optional.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a labeled CSI corpus.
    SynthDataset {
        #[command(flatten)]
        common: Common,
    },
    /// Convert a manifest of CSV recordings into CSID files.
    Import {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
    },
    /// Write the CSID recordings of a manifest as CSV.
    ExportCsv {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
    },
    /// Compute Doppler frequency spectrograms.
    Dfs {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
    },
    /// Stratified train/test split of a manifest.
    Split {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the conditional diffusion model.
    TrainDiff {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
    },
    /// Draw guided samples from a diffusion checkpoint.
    Sample {
        #[command(flatten)]
        common: Common,
        /// Diffusion checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of samples (overrides the config).
        #[arg(long)]
        n: Option<usize>,
        /// Gesture label to condition on.
        #[arg(long)]
        gesture: Option<u16>,
    },
    /// Append augmented samples to a training manifest.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
        /// none, crop, flip_time, scale_amplitude or generative.
        #[arg(long)]
        method: Option<String>,
        /// Augmentation ratio in percent: 0, 20, 40, 60, 80 or 100.
        #[arg(long)]
        ratio: Option<u32>,
        /// Diffusion checkpoint for the generative method.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a gesture classifier.
    TrainClf {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
        /// resnet_lite or mobile_lite.
        #[arg(long)]
        model: Option<String>,
    },
    /// Evaluate a classifier and export its features.
    EvalClf {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
        /// Classifier checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare generated spectrograms with real ones.
    Quality {
        #[command(flatten)]
        common: Common,
        /// Input manifest.
        #[arg(long)]
        input: PathBuf,
        /// Manifest of real spectrograms.
        #[arg(long)]
        reference: PathBuf,
        /// Classifier checkpoint whose features give the Fréchet distance.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Classifier accuracy across augmentation methods and ratios.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Training manifest.
        #[arg(long)]
        train: PathBuf,
        /// Test manifest.
        #[arg(long)]
        test: PathBuf,
        /// Diffusion checkpoint for the generative method.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated ratio percentages.
        #[arg(long)]
        ratios: Option<String>,
        /// Comma-separated methods.
        #[arg(long)]
        methods: Option<String>,
        /// resnet_lite or mobile_lite.
        #[arg(long)]
        model: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthDataset { .. } => "synth-dataset",
            Command::Import { .. } => "import",
            Command::ExportCsv { .. } => "export-csv",
            Command::Dfs { .. } => "dfs",
            Command::Split { .. } => "split",
            Command::TrainDiff { .. } => "train-diff",
            Command::Sample { .. } => "sample",
            Command::Augment { .. } => "augment",
            Command::TrainClf { .. } => "train-clf",
            Command::EvalClf { .. } => "eval-clf",
            Command::Quality { .. } => "quality",
            Command::Sweep { .. } => "sweep",
        }
    }
}

fn resolve(common: &Common, o: Overrides) -> CliResult<RunConfig> {
    RunConfig::resolve(common.config.as_deref(), &Overrides { seed: common.seed, ..o })
}

fn execute(command: &Command) -> CliResult<Value> {
    let none = Overrides::default;
    match command {
        Command::SynthDataset { common } => commands::synth_dataset(&resolve(common, none())?, &common.out),
        Command::Import { common, input } => commands::import(&resolve(common, none())?, input, &common.out),
        Command::ExportCsv { common, input } => {
            resolve(common, none())?;
            commands::export_csv_cmd(input, &common.out)
        }
        Command::Dfs { common, input } => commands::dfs(&resolve(common, none())?, input, &common.out),
        Command::Split { common, input } => commands::split(&resolve(common, none())?, input, &common.out),
        Command::TrainDiff { common, input } => commands::train_diff(&resolve(common, none())?, input, &common.out),
        Command::Sample {
            common,
            checkpoint,
            n,
            gesture,
        } => {
            let cfg = resolve(
                common,
                Overrides {
                    n: *n,
                    gesture: *gesture,
                    ..none()
                },
            )?;
            commands::sample(&cfg, checkpoint.as_deref(), &common.out)
        }
        Command::Augment {
            common,
            input,
            method,
            ratio,
            checkpoint,
        } => {
            let cfg = resolve(
                common,
                Overrides {
                    method: method.clone(),
                    ratio: *ratio,
                    ..none()
                },
            )?;
            commands::augment(&cfg, input, checkpoint.as_deref(), &common.out)
        }
        Command::TrainClf { common, input, model } => {
            let cfg = resolve(
                common,
                Overrides {
                    model: model.clone(),
                    ..none()
                },
            )?;
            commands::train_clf(&cfg, input, &common.out)
        }
        Command::EvalClf {
            common,
            input,
            checkpoint,
        } => commands::eval_clf(&resolve(common, none())?, input, checkpoint.as_deref(), &common.out),
        Command::Quality {
            common,
            input,
            reference,
            classifier,
        } => commands::quality(
            &resolve(common, none())?,
            input,
            reference,
            classifier.as_deref(),
            &common.out,
        ),
        Command::Sweep {
            common,
            train,
            test,
            checkpoint,
            ratios,
            methods,
            model,
        } => {
            let cfg = resolve(
                common,
                Overrides {
                    ratios: ratios.clone(),
                    methods: methods.clone(),
                    model: model.clone(),
                    ..none()
                },
            )?;
            commands::sweep(&cfg, train, test, checkpoint.as_deref(), &common.out)
        }
    }
}

/// Parse `args` and run one subcommand. The JSON summary goes to stdout and
/// errors go to stderr as one JSON line. Returns the process exit code: 0
/// on success, 2 for usage or config errors and 1 for pipeline failures.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    match execute(&cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json(name));
            e.exit_code()
        }
    }
}
