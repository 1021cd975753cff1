//! `xit` command-line tool: pretraining, linear probing, embedding export,
//! rank tables and synthetic data generation.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xit_core::XitError;

#[derive(Parser)]
#[command(name = "xit", version)]
#[command(about = "Multi-dataset self-supervised pretraining for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads a run config.
#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// JSON run config. Missing keys take their defaults.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Overrides `seed`.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Overrides `train.ablation` (full, xd_sicc, xd_tc or tc_only).
    #[arg(long, value_name = "NAME")]
    pub ablation: Option<String>,

    /// Overrides `data.max_length`.
    #[arg(long, value_name = "N")]
    pub max_length: Option<usize>,

    /// Output directory. Relative paths resolve against $XIT_OUTPUT_ROOT
    /// when it is set. Overrides `output_dir`.
    #[arg(long, value_name = "DIR")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    /// One cluster per class label.
    Class,
    /// One cluster per input dataset.
    Dataset,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    MacroF1,
    Accuracy,
    Auroc,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain on the collection named by `manifest`; writes a checkpoint,
    /// loss telemetry and the effective config.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Train a linear probe on a frozen encoder and score it on a test split.
    Finetune {
        #[command(flatten)]
        run: RunArgs,
        /// Checkpoint directory written by `pretrain`.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        /// Probe a freshly initialized encoder instead of the checkpoint.
        #[arg(long)]
        random_init: bool,
        /// Labeled training table.
        #[arg(long, value_name = "FILE")]
        train: PathBuf,
        /// Labeled test table.
        #[arg(long, value_name = "FILE")]
        test: PathBuf,
        /// Directory for the report, classifier and history.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Export encoder embeddings with PCA coordinates and the DBI.
    Embed {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        random_init: bool,
        /// Tables to embed; repeat for several datasets.
        #[arg(long = "dataset", value_name = "FILE", required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = GroupBy::Class)]
        group_by: GroupBy,
        /// CSV destination.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Mean-rank table over `<reports>/<method>/<dataset>.json` reports.
    Eval {
        #[arg(long, value_name = "DIR")]
        reports: PathBuf,
        #[arg(long, value_enum, default_value_t = Metric::MacroF1)]
        metric: Metric,
        /// CSV destination for the table.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Write a synthetic labeled dataset as a table.
    Synth {
        /// sine-freq, square-duty, sawtooth-slope or ar-noise.
        #[arg(long)]
        family: String,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 50)]
        samples_per_class: usize,
        #[arg(long, default_value_t = 128)]
        length: usize,
        #[arg(long, default_value_t = 0.05)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
}

/// Config and input problems exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    let input = err.chain().any(|cause| {
        cause
            .downcast_ref::<XitError>()
            .is_some_and(XitError::is_input_error)
            || cause.is::<std::io::Error>()
    });
    if input {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain { run, resume } => commands::pretrain(&run, resume),
        Command::Finetune {
            run,
            checkpoint,
            random_init,
            train,
            test,
            out,
        } => commands::finetune(&run, checkpoint.as_deref(), random_init, &train, &test, out),
        Command::Embed {
            run,
            checkpoint,
            random_init,
            datasets,
            group_by,
            out,
        } => commands::embed(
            &run,
            checkpoint.as_deref(),
            random_init,
            &datasets,
            group_by,
            out,
        ),
        Command::Eval {
            reports,
            metric,
            out,
        } => commands::eval(&reports, metric, out.as_deref()),
        Command::Synth {
            family,
            classes,
            samples_per_class,
            length,
            noise_sigma,
            seed,
            out,
        } => commands::synth(
            xit_core::synthbench::SynthSpec {
                family,
                classes,
                samples_per_class,
                length,
                noise_sigma,
                seed,
            },
            &out,
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
