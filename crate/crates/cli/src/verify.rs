use melglow::verify::{run_suite, Suite};

use crate::common::{env_seed, load_config};
use crate::error::{CliError, CliResult};

#[derive(clap::Args)]
pub struct Args {
    /// inversion, gradcheck, oracle, logdet, structure or all.
    #[arg(long, default_value = "all")]
    suite: String,
    /// Preset name or TOML file.
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Seed for the random instances (defaults to MELGLOW_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

pub fn run(args: Args) -> CliResult {
    let suites: Vec<Suite> = if args.suite == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![args
            .suite
            .parse()
            .map_err(|_| CliError::usage(format!("unknown suite {:?}", args.suite)))?]
    };
    let cfg = load_config(&args.config)?;
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let mut failed = Vec::new();
    for suite in suites {
        let report = run_suite(suite, &cfg.flow, seed)?;
        println!("{report}");
        if !report.passed() {
            failed.push(suite.name());
        }
    }
    if failed.is_empty() {
        println!("status=pass");
        Ok(())
    } else {
        println!("status=fail");
        Err(CliError::Verification(failed.join(", ")))
    }
}
