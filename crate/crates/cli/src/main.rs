//! `dslr`: index a corpus, retrieve, refine retrieved passages to their
//! relevant sentences, evaluate a reader on the result, and calibrate or
//! sweep the relevance threshold.
//!
//! Exit codes: 0 ok, 2 bad input, 3 upstream service failure, 4 too many
//! failed queries, 64 usage.

mod commands;
mod error;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use error::{CliError, EXIT_OK, EXIT_USAGE};
use settings::Settings;

#[derive(Parser)]
#[command(name = "dslr", version, about = "Sentence-level refinement of retrieved passages")]
struct Cli {
    /// TOML file whose keys are the long flag names with `_` for `-`.
    /// Precedence: file < DSLR_* environment < flags.
    #[arg(long, global = true, env = "DSLR_CONFIG")]
    config: Option<PathBuf>,
    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    emit_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a BM25 index file from a corpus (--corpus, --out).
    Index(Settings),
    /// Top-N passages per query as JSON-lines.
    Retrieve(Settings),
    /// Refined contexts per query as JSON-lines.
    Refine(Settings),
    /// Run the reader over refined contexts; records (--out) and report (--report).
    Eval(Settings),
    /// Estimate a threshold from the pooled sentence-score distribution.
    Calibrate(Settings),
    /// Evaluate at thresholds for several percentiles; CSV with an oracle row.
    Sweep(Settings),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, flags) = match cli.command {
        Command::Index(s) => ("index", s),
        Command::Retrieve(s) => ("retrieve", s),
        Command::Refine(s) => ("refine", s),
        Command::Eval(s) => ("eval", s),
        Command::Calibrate(s) => ("calibrate", s),
        Command::Sweep(s) => ("sweep", s),
    };
    let file = match &cli.config {
        Some(path) => Settings::from_toml_file(path)?,
        None => Settings::default(),
    };
    let s = file.layered(flags).resolved();
    if cli.emit_config {
        print!("# dslr {name}\n{}", s.to_toml());
        return Ok(());
    }
    match name {
        "index" => commands::cmd_index(&s),
        "retrieve" => commands::cmd_retrieve(&s),
        "refine" => commands::cmd_refine(&s),
        "eval" => commands::cmd_eval(&s),
        "calibrate" => commands::cmd_calibrate(&s),
        "sweep" => commands::cmd_sweep(&s),
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::from(EXIT_OK as u8),
                _ => ExitCode::from(EXIT_USAGE as u8),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dslr: error: {}", e.message());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
