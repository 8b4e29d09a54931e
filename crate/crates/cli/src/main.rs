//! `melglow`: preprocess audio, train, synthesize, verify and benchmark.

// `!(x > 0.0)` deliberately rejects NaN along with non-positive values
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod bench;
mod common;
mod error;
mod preprocess;
mod synthesize;
mod train;
mod verify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "melglow", version, about = "LVC flow vocoder tools")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute mel caches for a directory of WAV files.
    Preprocess(preprocess::Args),
    /// Train a model by maximum likelihood.
    Train(train::Args),
    /// Generate audio from a mel cache or, by copy-synthesis, from a WAV.
    Synthesize(synthesize::Args),
    /// Run the property suites.
    Verify(verify::Args),
    /// Print parameter counts and optionally synthesis throughput.
    Bench(bench::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Preprocess(a) => preprocess::run(a),
        Command::Train(a) => train::run(a),
        Command::Synthesize(a) => synthesize::run(a),
        Command::Verify(a) => verify::run(a),
        Command::Bench(a) => bench::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
