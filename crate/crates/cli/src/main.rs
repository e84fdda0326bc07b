mod chat;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use slotgen::Execution;

/// Joint slot extraction and multimodal response generation.
#[derive(Debug, Parser)]
#[command(name = "slotgen", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Run on a single thread instead of the data-parallel pool.
    #[arg(long, global = true)]
    sequential: bool,
}

impl ExecArgs {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Beam width (1 selects greedy decoding).
    #[arg(long)]
    beam: Option<usize>,
    /// Maximum response length in tokens.
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic catalog, knowledge base and dialogue splits.
    GenCorpus {
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        catalog_size: usize,
        #[arg(long, default_value_t = 500)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        valid: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 4)]
        turn_pairs: usize,
        /// Probability that a dialogue contains a knowledge-base turn.
        #[arg(long, default_value_t = slotgen::corpus::DEFAULT_KB_RATE)]
        kb_rate: f64,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Train a model and save the best-validation checkpoint.
    Train {
        /// Run configuration (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory written by gen-corpus.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a configuration key, e.g. `--set epochs=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Evaluate a checkpoint and write the report as text and key=value files.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate.
        #[arg(long, default_value = "test")]
        split: String,
        /// Report directory (defaults to the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        gen: GenArgs,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Tag every user turn of a split and write `token/TAG` lines.
    PredictSlots {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output tag file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Interactive session; `/reset` clears the history and `/quit` exits.
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory providing the catalog and knowledge base.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        gen: GenArgs,
    },
    /// Train and evaluate the ±SA × ±KB × ±contextual grid over several seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Directory for the ablation table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[command(flatten)]
        exec: ExecArgs,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(commands::CliError::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
