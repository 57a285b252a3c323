//! Commands behind the `fineprune` binary.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::config::{self, RunConfig};
use crate::error::{Error, Result};
use crate::finepruner::{self, Mode, RunReport};
use crate::nnet;
use crate::report;
use crate::selftest;

/// Exit status for a command result: 0 ok, 2 configuration error, 1 anything else.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_)) => 2,
        Err(_) => 1,
    }
}

pub const SEED_ENV: &str = "FINEPRUNE_SEED";

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

pub struct RunArgs {
    pub mode: Mode,
    pub config: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub overrides: Vec<String>,
}

/// Opens `<out>/evals.jsonl` for writing, creating `out` if needed.
fn open_evals(out: &Path) -> Result<BufWriter<std::fs::File>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(report::EVALS_FILE);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(BufWriter::new(file))
}

fn write_line<W: Write>(w: &mut W, path: &Path, record: &crate::bo::EvalRecord) -> Result<()> {
    let line = serde_json::to_string(record).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    writeln!(w, "{line}")
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn cmd_run(args: &RunArgs) -> Result<RunReport> {
    let cfg = match &args.config {
        Some(path) => RunConfig::from_file(path, &args.overrides, args.seed, env_seed()?)?,
        None => RunConfig::from_sources("", &args.overrides, args.seed, env_seed()?)?,
    };
    let evals_path = args.out.join(report::EVALS_FILE);
    let mut evals = open_evals(&args.out)?;

    let (net, task) = config::prepare(&cfg)?;
    let output = if args.mode == Mode::Fineprune && !cfg.lambda_grid.is_empty() {
        let selection = finepruner::select_lambda(&cfg.lambda_grid, &cfg.fineprune, &net, &task)?;
        for (lambda, out, _) in &selection.runs {
            eprintln!(
                "lambda {lambda}: val error {}, compression {}",
                out.report.last().eps_val,
                out.report.compression_rate
            );
        }
        let (_, out, records) = selection
            .runs
            .into_iter()
            .find(|(l, _, _)| *l == selection.lambda)
            .expect("selected lambda comes from the grid");
        for r in &records {
            write_line(&mut evals, &evals_path, r)?;
        }
        out
    } else {
        finepruner::run_mode(args.mode, &cfg.fineprune, &net, &task, |r| {
            write_line(&mut evals, &evals_path, r)
        })?
    };

    report::write_report(&args.out, &output.report)?;
    nnet::write_checkpoint_file(&output.network.snapshot(), &args.out.join(report::CHECKPOINT_FILE))?;
    let r = &output.report;
    eprintln!(
        "{}: {} rounds, val acc {}, test acc {}, {} parameters, compression {}",
        r.mode.name(),
        r.rounds.len(),
        r.val_accuracy,
        r.test_accuracy,
        r.parameters,
        r.compression_rate
    );
    match &output.report.error {
        Some(e) => Err(Error::State(format!("run incomplete, partial report written: {e}"))),
        None => Ok(output.report),
    }
}

pub fn cmd_report(dirs: &[PathBuf], csv: Option<&Path>) -> Result<String> {
    let runs = report::load_runs(dirs)?;
    let tables = report::build_tables(&runs);
    if let Some(path) = csv {
        report::write_file(path, &report::render_csv(&tables)?)?;
    }
    Ok(report::render_text(&tables))
}

pub fn cmd_plotdata(dir: &Path, include_initial: bool) -> Result<String> {
    Ok(report::plotdata(&report::load_report(dir)?, include_initial))
}

/// Runs every oracle suite; fails if any check fails.
pub fn cmd_selftest(seed: u64) -> Result<Vec<selftest::Check>> {
    let checks = selftest::run_all(seed)?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(Error::State(format!(
            "{failed} of {} self-test checks failed",
            checks.len()
        )));
    }
    Ok(checks)
}
