//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use fineprune::bo::EvalRecord;
use fineprune::cli::{self, RunArgs};
use fineprune::config::{self, RunConfig};
use fineprune::finepruner::{run_mode, Mode, RunReport};
use fineprune::nnet::{read_checkpoint_file, write_checkpoint};
use fineprune::report;
use fineprune::selftest::{self, Check};

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn from_check(id: usize, name: &'static str, check: fineprune::Result<Check>, limit_s: f64, start: Instant) -> Outcome {
    let elapsed = start.elapsed().as_secs_f64();
    match check {
        Ok(c) => Outcome {
            id,
            name,
            passed: c.passed && elapsed < limit_s,
            detail: if limit_s.is_finite() {
                format!("{} [{elapsed:.2}s, limit {limit_s}s]", c.detail)
            } else {
                format!("{} [{elapsed:.2}s]", c.detail)
            },
        },
        Err(e) => Outcome {
            id,
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

const TOLERANCE: f64 = 0.02;

/// Compression credited to a run at the accuracy tolerance: its own rate if
/// validation accuracy is within `TOLERANCE` of fine-tuning only, else 1.
fn compression_at_tolerance(run: &RunReport, reference: &RunReport) -> f64 {
    if reference.val_accuracy - run.val_accuracy <= TOLERANCE + 1e-12 {
        run.compression_rate
    } else {
        1.0
    }
}

fn desk_scale(seeds: u64) -> fineprune::Result<Outcome> {
    let mut within = 0;
    let mut ordered = 0;
    let mut worst_seed_s: f64 = 0.0;
    let mut rows = Vec::new();
    for seed in 0..seeds {
        let start = Instant::now();
        let cfg = RunConfig::from_sources("log.timing = false", &[], Some(seed), None)?;
        let (net, task) = config::prepare(&cfg)?;
        let ft = run_mode(Mode::FinetuneOnly, &cfg.fineprune, &net, &task, |_| Ok(()))?.report;
        let ind = run_mode(Mode::Independent, &cfg.fineprune, &net, &task, |_| Ok(()))?.report;
        let fp = run_mode(Mode::Fineprune, &cfg.fineprune, &net, &task, |_| Ok(()))?.report;
        worst_seed_s = worst_seed_s.max(start.elapsed().as_secs_f64());
        let (fp_tol, ind_tol) = (compression_at_tolerance(&fp, &ft), compression_at_tolerance(&ind, &ft));
        if fp.compression_rate >= 10.0 && fp_tol == fp.compression_rate {
            within += 1;
        }
        if fp_tol >= ind_tol {
            ordered += 1;
        }
        rows.push(format!(
            "seed {seed}: val acc ft {:.3} ind {:.3} fp {:.3}; compression ind {:.1}x fp {:.1}x",
            ft.val_accuracy, ind.val_accuracy, fp.val_accuracy, ind.compression_rate, fp.compression_rate
        ));
    }
    for r in &rows {
        println!("    {r}");
    }
    let need_a = (seeds * 8).div_ceil(10) as usize;
    let need_b = (seeds * 7).div_ceil(10) as usize;
    Ok(Outcome {
        id: 7,
        name: "desk-scale end-to-end",
        passed: within >= need_a && ordered >= need_b && worst_seed_s < 600.0,
        detail: format!(
            ">= 10x within {} points in {within}/{seeds} seeds (need {need_a}); fineprune >= independent at tolerance in {ordered}/{seeds} (need {need_b}); slowest seed {worst_seed_s:.1}s",
            TOLERANCE * 100.0
        ),
    })
}

fn run_cli(out: &Path, seed: u64) -> fineprune::Result<RunReport> {
    cli::cmd_run(&RunArgs {
        mode: Mode::Fineprune,
        config: None,
        out: out.to_path_buf(),
        seed: Some(seed),
        overrides: vec!["log.timing=false".into()],
    })
}

fn bookkeeping(dir: &Path) -> fineprune::Result<Outcome> {
    let out = dir.join("bookkeeping");
    let report = run_cli(&out, 3)?;
    let text =
        std::fs::read_to_string(out.join(report::EVALS_FILE)).map_err(|e| fineprune::Error::State(e.to_string()))?;
    let mut worst: f64 = 0.0;
    let mut lines = 0;
    for line in text.lines() {
        let r: EvalRecord = serde_json::from_str(line).map_err(|e| fineprune::Error::State(e.to_string()))?;
        if !r.failed {
            worst = worst.max((r.l - (r.eps - report.lambda * r.s)).abs());
        }
        lines += 1;
    }
    let layer_sum: usize = report.last().layers.iter().map(|l| l.parameters_after()).sum();
    let table_ok = {
        let tables = report::build_tables(&[(out.clone(), report.clone())]);
        let rows = &tables[1].rows[1..];
        let cell = |row: &Vec<String>| row[2].parse::<usize>().unwrap_or(usize::MAX);
        rows[..rows.len() - 1].iter().map(cell).sum::<usize>() == report.parameters
            && cell(&rows[rows.len() - 1]) == report.parameters
    };
    let ckpt_path = out.join(report::CHECKPOINT_FILE);
    let on_disk = std::fs::read(&ckpt_path).map_err(|e| fineprune::Error::State(e.to_string()))?;
    let state = read_checkpoint_file(&ckpt_path)?;
    let mut rewritten = Vec::new();
    write_checkpoint(&state, &mut rewritten).map_err(|e| fineprune::Error::State(e.to_string()))?;
    let total: usize = state.layers.iter().map(|l| l.weights.len()).sum();
    let kept: usize = state.layers.iter().map(|l| l.mask.iter().filter(|&&m| m).count()).sum();
    let recomputed = total as f64 / kept.max(1) as f64;
    let reloaded = report::load_report(&out)?;
    let passed = worst <= 1e-12
        && lines == report.evaluations
        && layer_sum == report.parameters
        && table_ok
        && on_disk == rewritten
        && recomputed == report.compression_rate
        && reloaded == report;
    Ok(Outcome {
        id: 8,
        name: "bookkeeping identities",
        passed,
        detail: format!(
            "{lines} records, max |l - (eps - lambda s)| = {worst:e}; layer sum {layer_sum} vs total {}; checkpoint bitwise {}; compression {} vs checkpoint {recomputed}",
            report.parameters,
            on_disk == rewritten,
            report.compression_rate
        ),
    })
}

fn reproducibility(dir: &Path) -> fineprune::Result<Outcome> {
    let (a, b) = (dir.join("repro_a"), dir.join("repro_b"));
    run_cli(&a, 5)?;
    run_cli(&b, 5)?;
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).map_err(|e| fineprune::Error::State(e.to_string()));
    let same_evals = read(&a, report::EVALS_FILE)? == read(&b, report::EVALS_FILE)?;
    let same_run = read(&a, report::RUN_FILE)? == read(&b, report::RUN_FILE)?;
    let same_ckpt = read(&a, report::CHECKPOINT_FILE)? == read(&b, report::CHECKPOINT_FILE)?;
    Ok(Outcome {
        id: 9,
        name: "reproducibility",
        passed: same_evals && same_run && same_ckpt,
        detail: format!(
            "evals.jsonl identical {same_evals}, run.json identical {same_run}, final.fpn1 identical {same_ckpt}"
        ),
    })
}

fn fail(id: usize, name: &'static str, e: fineprune::Error) -> Outcome {
    Outcome {
        id,
        name,
        passed: false,
        detail: format!("error: {e}"),
    }
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let mut outcomes = Vec::new();

    let t = Instant::now();
    outcomes.push(from_check(
        1,
        "GP oracle equivalence",
        selftest::gp_oracle(50, 0),
        5.0,
        t,
    ));
    let t = Instant::now();
    outcomes.push(from_check(
        2,
        "EI correctness",
        selftest::ei_monte_carlo(20, 1_000_000, 0),
        30.0,
        t,
    ));
    let t = Instant::now();
    outcomes.push(from_check(3, "BO sanity", selftest::bo_quadratic(10, 50), 10.0, t));
    let t = Instant::now();
    outcomes.push(from_check(4, "gradient check", selftest::gradient_check(10), 10.0, t));
    let t = Instant::now();
    outcomes.push(from_check(
        5,
        "mask semantics",
        selftest::mask_semantics(100, 0),
        f64::INFINITY,
        t,
    ));
    let t = Instant::now();
    outcomes.push(from_check(
        6,
        "surgery properties",
        selftest::surgery_properties(100, 0),
        f64::INFINITY,
        t,
    ));
    outcomes.push(desk_scale(10).unwrap_or_else(|e| fail(7, "desk-scale end-to-end", e)));
    outcomes.push(bookkeeping(tmp.path()).unwrap_or_else(|e| fail(8, "bookkeeping identities", e)));
    outcomes.push(reproducibility(tmp.path()).unwrap_or_else(|e| fail(9, "reproducibility", e)));

    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} criterion {} ({}): {}", o.id, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("acceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
