use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fineprune::cli::{self, RunArgs};
use fineprune::finepruner::Mode;

#[derive(Parser)]
#[command(
    name = "fineprune",
    version,
    about = "Joint fine-tuning and pruning guided by Bayesian optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune (and prune) a pretrained network; writes run.json, evals.jsonl and final.fpn1.
    Run {
        #[arg(long, value_parser = parse_mode, default_value = "fineprune")]
        mode: Mode,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
        /// Overrides the config seed; FINEPRUNE_SEED is used when neither is given.
        #[arg(long)]
        seed: Option<u64>,
        /// key=value override, repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Summary table across runs and a per-layer table for each.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the tables as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// CSV of round, compression_rate, val_error.
    Plotdata {
        dir: PathBuf,
        /// Emit a round-0 row for the network before pruning.
        #[arg(long)]
        include_initial: bool,
    },
    /// Run the oracle test suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: fineprune::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            mode,
            config,
            out,
            seed,
            overrides,
        } => cli::cmd_run(&RunArgs {
            mode,
            config,
            out,
            seed,
            overrides,
        })
        .map(|_| ()),
        Command::Report { dirs, csv } => cli::cmd_report(&dirs, csv.as_deref()).map(|text| print!("{text}")),
        Command::Plotdata { dir, include_initial } => {
            cli::cmd_plotdata(&dir, include_initial).map(|text| print!("{text}"))
        }
        Command::Selftest { seed } => cli::cmd_selftest(seed).map(|_| ()),
    };
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(cli::exit_code(&result) as u8)
}
