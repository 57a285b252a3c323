mod common;

use std::path::Path;
use std::process::{Command, Output};

use fineprune::finepruner::RunReport;
use fineprune::nnet::read_checkpoint_file;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fineprune"));
    c.env_remove("FINEPRUNE_SEED");
    c
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("cfg.toml");
    let key = |l: &str| l.split('=').next().unwrap().trim().to_string();
    let overridden: Vec<String> = extra.lines().map(key).collect();
    let base: Vec<&str> = common::QUICK
        .lines()
        .filter(|l| !overridden.contains(&key(l)))
        .collect();
    std::fs::write(&path, format!("{}\n{extra}\n", base.join("\n"))).unwrap();
    path
}

fn run(dir: &Path, mode: &str, out: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("cfg.toml");
    bin()
        .args(["run", "--mode", mode, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join(out))
        .args(extra)
        .output()
        .unwrap()
}

fn load(dir: &Path) -> RunReport {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

#[test]
fn run_writes_three_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    let out = run(tmp.path(), "fineprune", "fp", &["--seed", "3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("fp");
    for f in ["run.json", "evals.jsonl", "final.fpn1"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let report = load(&dir);
    assert_eq!(report.seed, 3);
    let lines = std::fs::read_to_string(dir.join("evals.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), report.evaluations);
    for line in lines.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["round", "eval_idx", "x", "eps", "s", "l", "wall_s", "failed"] {
            assert!(v.get(key).is_some(), "{key} missing in {line}");
        }
        let r: fineprune::bo::EvalRecord = serde_json::from_str(line).unwrap();
        assert!((r.l - (r.eps - report.lambda * r.s)).abs() <= 1e-12);
    }
    let state = read_checkpoint_file(&dir.join("final.fpn1")).unwrap();
    let total: usize = state.layers.iter().map(|l| l.weights.len()).sum();
    let kept: usize = state.layers.iter().map(|l| l.mask.iter().filter(|&&m| m).count()).sum();
    assert_eq!(report.compression_rate, total as f64 / kept as f64);
}

#[test]
fn misspelled_key_exits_2_with_suggestion() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "lamda = 1");
    let out = run(tmp.path(), "fineprune", "bad", &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lamda") && err.contains("`lambda`"), "{err}");
    assert!(!tmp.path().join("bad").exists());

    write_config(tmp.path(), "");
    let out = run(tmp.path(), "fineprune", "bad", &["--set", "finetune.lr=0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune.lr"));
    let out = run(tmp.path(), "sometimes", "bad", &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unwritable_output_fails_before_compute() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let start = std::time::Instant::now();
    let out = run(tmp.path(), "fineprune", "file/sub", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("file"));
    assert!(start.elapsed().as_secs_f64() < 5.0);
}

#[test]
fn finetune_only_report_and_tables() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    assert!(run(tmp.path(), "finetune_only", "ft", &[]).status.success());
    let report = load(&tmp.path().join("ft"));
    assert_eq!(report.compression_rate, 1.0);

    let csv = tmp.path().join("t.csv");
    let out = bin()
        .arg("report")
        .arg(tmp.path().join("ft"))
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let summary: Vec<&str> = text.split("\n\n").next().unwrap().lines().collect();
    assert_eq!(summary.len(), 3, "{text}");
    assert_eq!(summary[2].split_whitespace().last(), Some("--"));

    // the CSV has the same cells, line for line
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), csv_text.lines().count());
    for (t, c) in text.lines().zip(csv_text.lines()) {
        assert_eq!(
            t.split_whitespace().collect::<Vec<_>>(),
            c.split(',').filter(|s| !s.is_empty()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn report_layers_sum_and_csv_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "");
    for name in ["a", "b"] {
        let out = run(tmp.path(), "independent", name, &["--seed", "5"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut csvs = Vec::new();
    for name in ["a", "b"] {
        let csv = tmp.path().join(format!("{name}.csv"));
        // same directory name so the run label matches
        let dir = tmp.path().join(name);
        let moved = tmp.path().join(format!("{name}_x")).join("run");
        std::fs::create_dir_all(moved.parent().unwrap()).unwrap();
        std::fs::rename(&dir, &moved).unwrap();
        assert!(bin()
            .arg("report")
            .arg(&moved)
            .arg("--csv")
            .arg(&csv)
            .status()
            .unwrap()
            .success());
        csvs.push(std::fs::read(&csv).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);

    let text = String::from_utf8(csvs[0].clone()).unwrap();
    let report = load(&tmp.path().join("a_x").join("run"));
    let layers: Vec<&str> = text.split("\n\n").nth(1).unwrap().lines().skip(2).collect();
    let after = |l: &str| l.split(',').nth(2).unwrap().parse::<usize>().unwrap();
    let (rows, total) = layers.split_at(layers.len() - 1);
    assert_eq!(rows.iter().map(|l| after(l)).sum::<usize>(), report.parameters);
    assert_eq!(after(total[0]), report.parameters);
    // numbers parse back exactly
    let summary = text.lines().nth(2).unwrap();
    let cells: Vec<&str> = summary.split(',').collect();
    assert_eq!(cells[3].parse::<f64>().unwrap(), report.val_accuracy);
    assert_eq!(cells[6].parse::<f64>().unwrap(), report.compression_rate);
}

#[test]
fn report_names_missing_or_corrupt_files() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nothing");
    let out = bin().arg("report").arg(&missing).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nothing/run.json"));

    let corrupt = tmp.path().join("corrupt");
    std::fs::create_dir_all(&corrupt).unwrap();
    std::fs::write(corrupt.join("run.json"), "{ not json").unwrap();
    let out = bin().arg("plotdata").arg(&corrupt).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("corrupt/run.json"));
}

#[test]
fn plotdata_rows_follow_rounds() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(
        tmp.path(),
        "outer.max_rounds = 10\nouter.l_tol = 0\nouter.s_tol = 0\nbo.budget = 3\nbo.n_init = 2",
    );
    let out = run(tmp.path(), "fineprune", "fp", &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("fp");
    let report = load(&dir);
    assert_eq!(report.rounds.len(), 10);

    let out = bin().arg("plotdata").arg(&dir).output().unwrap();
    let csv = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "round,compression_rate,val_error");
    assert_eq!(lines.len(), 11);
    for (line, r) in lines[1..].iter().zip(&report.rounds) {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0].parse::<usize>().unwrap(), r.round);
        assert_eq!(cells[1].parse::<f64>().unwrap(), r.compression_rate);
        assert_eq!(cells[2].parse::<f64>().unwrap(), r.eps_val);
    }

    let out = bin()
        .arg("plotdata")
        .arg(&dir)
        .arg("--include-initial")
        .output()
        .unwrap();
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.lines().nth(1).unwrap().starts_with("0,1,"));
}

#[test]
fn seed_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    write_config(tmp.path(), "outer.max_rounds = 1\nbo.budget = 2");
    let cfg = tmp.path().join("cfg.toml");
    let go = |out: &str, env: Option<&str>, extra: &[&str]| {
        let mut c = bin();
        c.args(["run", "--mode", "independent", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(tmp.path().join(out))
            .args(extra);
        if let Some(v) = env {
            c.env("FINEPRUNE_SEED", v);
        }
        assert!(c.status().unwrap().success());
        load(&tmp.path().join(out)).seed
    };
    assert_eq!(go("a", Some("11"), &[]), 11);
    assert_eq!(go("b", Some("11"), &["--seed", "4"]), 4);
    assert_eq!(go("c", Some("11"), &["--set", "seed=6"]), 6);
    assert_eq!(go("d", None, &[]), 0);
}

#[test]
fn selftest_passes() {
    let out = bin().arg("selftest").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 6, "{text}");
}
