use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "latflow", version, about = "Many-to-many generation with latent flow priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags every command accepts.
#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML config; unset keys take built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    TGivenV,
    VGivenT,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Domain {
    V,
    T,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its truth files.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Overrides train.epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw conditional samples for every record of an input file.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        direction: Direction,
        /// JSONL records with `x_v` (t-given-v) or `x_t` (v-given-t).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long)]
        greedy: bool,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Write the metric report for the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Overrides eval.max_items.
        #[arg(long)]
        max_items: Option<usize>,
    },
    /// Write posterior latents of one split for external plotting.
    ExportLatents {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "v")]
        domain: Domain,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Train {
            common,
            data,
            epochs,
            resume,
        } => commands::train(&common, &data, epochs, resume.as_deref()),
        Command::Sample {
            common,
            checkpoint,
            direction,
            input,
            n,
            greedy,
            temperature,
        } => commands::sample(&common, &checkpoint, direction, &input, n, greedy, temperature),
        Command::Eval {
            common,
            checkpoint,
            data,
            max_items,
        } => commands::eval(&common, &checkpoint, &data, max_items),
        Command::ExportLatents {
            common,
            checkpoint,
            data,
            split,
            domain,
        } => commands::export_latents(&common, &checkpoint, &data, &split, domain),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace(['\n', '\r'], " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
