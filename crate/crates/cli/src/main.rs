//! `damvp`: pretrain an encoder, calibrate its clustering threshold,
//! measure diversity, meta-train and adapt prompts, evaluate and report.

mod artifacts;
mod commands;
mod source;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// A malformed command line, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HeadArg {
    Tuning,
    Freezing,
    Hardcoded,
    Active,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Parser)]
#[command(name = "damvp", version, about = "Diversity-aware visual prompting on a small frozen CNN")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the encoder on a pretext dataset and freeze it.
    Pretrain {
        #[arg(long)]
        data: String,
        /// Weight file to write; metadata goes to `<out>.json`.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Derive the clustering threshold from a single-mode reference set.
    Calibrate {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        reference: String,
        /// Metadata file to write; defaults to `<encoder>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Mean pairwise distance over sampled image pairs.
    Diversity {
        #[arg(long)]
        data: String,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory for the CSV, summary and manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn a meta prompt across several datasets.
    MetaTrain {
        #[arg(long, value_delimiter = ',', required = true)]
        datasets: Vec<String>,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Partition a dataset and learn one prompt per subset.
    Adapt {
        #[arg(long)]
        data: String,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        meta: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: HeadArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Route, prompt and score one split of a dataset.
    Eval {
        #[arg(long)]
        data: String,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate diversity and adaptation summaries under a directory.
    Report {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> anyhow::Result<()> {
    use commands::*;
    match cmd {
        Command::Pretrain { data, out, epochs, seed, config } => pretrain_cmd(&data, &out, epochs, seed, config.as_deref()),
        Command::Calibrate { encoder, reference, out, seed, config } => calibrate_cmd(&encoder, &reference, out.as_deref(), seed, config.as_deref()),
        Command::Diversity { data, encoder, pairs, seed, config, out } => diversity_cmd(&data, &encoder, pairs, seed, config.as_deref(), out.as_deref()),
        Command::MetaTrain { datasets, encoder, config, out, seed } => meta_train_cmd(&datasets, &encoder, config.as_deref(), &out, seed),
        Command::Adapt { data, encoder, meta, mode, config, out, seed } => adapt_cmd(&data, &encoder, meta.as_deref(), mode, config.as_deref(), &out, seed),
        Command::Eval { data, bundle, encoder, split, config, seed, out } => eval_cmd(&data, &bundle, &encoder, split, config.as_deref(), seed, out.as_deref()),
        Command::Report { runs, out } => report_cmd(&runs, out.as_deref()),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<damvp_core::Error>() {
            return e.kind();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn one_line(err: &anyhow::Error) -> String {
    format!("{err:#}").replace(['\n', '\r'], " ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) if err.downcast_ref::<UsageError>().is_some() => {
            eprintln!("damvp: error kind=usage: {}", one_line(&err));
            ExitCode::from(1)
        }
        Err(err) => {
            eprintln!("damvp: error kind={}: {}", error_kind(&err), one_line(&err));
            ExitCode::from(2)
        }
    }
}
