use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use osmd_market::cli::{
    error_json, resolve_output_dir, run_experiment, validate_config, Overrides,
};
use osmd_market::market::SamplerKind;
use osmd_market::Result;

#[derive(Parser)]
#[command(
    name = "osmd-market",
    version,
    about = "Adaptive-sampling data market experiments"
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config and OSMD_MARKET_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list replacing the config's seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Run a single sampler.
        #[arg(long)]
        sampler: Option<SamplerKind>,
        /// Record the full gain matrix and report regret.
        #[arg(long)]
        regret: bool,
        /// Shapley baseline with N permutations per round (0 = exact).
        #[arg(long, value_name = "N")]
        shapley: Option<usize>,
    },
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::Run {
            config,
            out,
            seeds,
            sampler,
            regret,
            shapley,
        } => {
            let mut cfg = validate_config(&config)?;
            Overrides {
                out,
                seeds,
                sampler,
                regret,
                shapley,
            }
            .apply(&mut cfg)?;
            let dir = resolve_output_dir(&cfg);
            let report = run_experiment(&cfg, &dir)?;
            for f in &report.files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
