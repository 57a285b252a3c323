mod common;

use common::{bits, quick, task_from};
use fineprune::data::{generate_synthetic, split};
use fineprune::finepruner::*;
use fineprune::nnet::{read_checkpoint_file, top1_error, write_checkpoint_file, Activation, LayerSpec, MaskedNetwork};
use fineprune::rng;
use fineprune::surgery::{self, LayerThreshold, PruningBounds, PruningParams};

#[test]
fn fine_tune_separates_blobs_and_keeps_masks() {
    let ds = generate_synthetic(2, 40, 2, 0.1, 3).unwrap();
    let splits = split(&ds, (0.5, 0.25, 0.25), 4).unwrap().standardized();
    let specs = vec![
        LayerSpec::dense(2, 16, Activation::Relu),
        LayerSpec::dense(16, 2, Activation::Softmax),
    ];
    let mut net = MaskedNetwork::init(specs, 5).unwrap();
    // mask a quarter of the first layer; fine-tuning must leave it alone
    for (i, m) in net.layers_mut()[0].mask.iter_mut().enumerate() {
        *m = i % 4 != 0;
    }
    let masks: Vec<Vec<bool>> = net.layers().iter().map(|l| l.mask.clone()).collect();
    let before = surgery::sparsity(&net);
    let mut shuffle = rng::rng(6);
    fine_tune(&mut net, &splits.train, 0.01, 10, 1, &mut shuffle).unwrap();
    assert_eq!(top1_error(&net, [&splits.train.as_batch().unwrap()]).unwrap(), 0.0);
    assert_eq!(surgery::sparsity(&net), before);
    assert_eq!(masks, net.layers().iter().map(|l| l.mask.clone()).collect::<Vec<_>>());
    assert!(fine_tune(&mut net, &splits.train, 0.01, 0, 1, &mut shuffle).is_err());
    assert!(fine_tune(&mut net, &splits.train, 0.0, 1, 1, &mut shuffle).is_err());
}

#[test]
fn zero_learning_rate_is_a_config_error() {
    let cfg = FinePruneConfig {
        lr: 0.0,
        ..FinePruneConfig::default()
    };
    assert!(cfg.validate().is_err());
    let cfg = FinePruneConfig {
        tau: 1.5,
        ..FinePruneConfig::default()
    };
    assert!(cfg.validate().is_err());
}

#[test]
fn objective_is_side_effect_free() {
    let (cfg, mut net, task) = quick(1);
    let snapshot = net.snapshot();
    let before = bits(&snapshot);
    let bounds = PruningBounds::default();
    for point in [vec![0.5; 8], vec![0.9; 8], vec![0.1; 8]] {
        let params = bounds.denormalize(&point).unwrap();
        let ev = evaluate_objective(&mut net, &snapshot, &params, &task, &cfg, 1).unwrap();
        assert_eq!(bits(&net.snapshot()), before);
        assert!(ev.s > 0.0);
        assert_eq!(ev.l, ev.eps - cfg.lambda * ev.s);
    }
}

#[test]
fn no_pruning_without_tuning_reproduces_the_snapshot_error() {
    let (cfg, mut net, task) = quick(2);
    let cfg = FinePruneConfig { eval_epochs: 0, ..cfg };
    let snapshot = net.snapshot();
    let ev = evaluate_objective(&mut net, &snapshot, &PruningParams::no_pruning(3), &task, &cfg, 1).unwrap();
    assert_eq!(ev.eps, task.validation_error(&net).unwrap());
    assert_eq!(ev.s, 0.0);
    assert_eq!(ev.l, ev.eps);
}

#[test]
fn pruning_everything_predicts_one_class() {
    let (cfg, mut net, task) = quick(3);
    let cfg = FinePruneConfig { eval_epochs: 0, ..cfg };
    let snapshot = net.snapshot();
    let all = PruningParams {
        layers: vec![LayerThreshold { a: 1e9, m: 0.0 }; 3],
        p0: 1.0,
        kappa: 0.0,
    };
    let ev = evaluate_objective(&mut net, &snapshot, &all, &task, &cfg, 1).unwrap();
    assert_eq!(ev.s, 1.0);
    assert_eq!(ev.l, ev.eps - 1.0);
    // with every weight gone the logits are the output biases, the same for every row,
    // so the error is that of a constant predictor on a stratified split
    let counts = task.splits.validation.class_counts();
    let n = task.splits.validation.len() as f64;
    assert!(
        counts.iter().any(|&c| (ev.eps - (1.0 - c as f64 / n)).abs() < 1e-12),
        "{} {counts:?}",
        ev.eps
    );
}

#[test]
fn objective_arithmetic() {
    let (lambda, eps, s) = (1.0f64, 0.07f64, 0.98f64);
    assert!((eps - lambda * s - (-0.91)).abs() < 1e-12);
}

#[test]
fn fineprune_round_bookkeeping() {
    let (cfg, net, task) = quick(4);
    let mut records = Vec::new();
    let out = run_fineprune(&cfg, &net, &task, |r| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    let report = &out.report;
    assert!(report.complete);
    assert!(!report.rounds.is_empty() && report.rounds.len() <= cfg.max_rounds);
    assert_eq!(report.evaluations, records.len());
    assert_eq!(
        report.rounds.iter().map(|r| r.evaluations).sum::<usize>(),
        records.len()
    );
    for r in &records {
        assert!(r.round >= 1 && r.round <= report.rounds.len());
        if !r.failed {
            assert!((r.l - (r.eps - cfg.lambda * r.s)).abs() <= 1e-12);
        }
    }
    for (k, r) in report.rounds.iter().enumerate() {
        assert_eq!(r.round, k + 1);
        assert!(r.evaluations <= cfg.bo.budget);
        let expected = (1.0 - r.s) * out.network.total_weights() as f64 + out.network.total_biases() as f64;
        assert!((r.parameters as f64 - expected).abs() < 1e-6);
        let pruned: f64 = r.layers.iter().map(|l| l.sparsity * l.weights as f64).sum();
        assert!((pruned / out.network.total_weights() as f64 - r.s).abs() < 1e-12);
        assert_eq!(
            r.layers.iter().map(|l| l.parameters_after()).sum::<usize>(),
            r.parameters
        );
        assert!(r.compression_rate >= 1.0);
        assert!(r.best_params.is_some());
    }
    assert_eq!(report.initial.round, 0);
    assert_eq!(report.initial.compression_rate, 1.0);
    assert_eq!(report.compression_rate, report.last().compression_rate);

    // compression cross-checked against the checkpoint on disk
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.fpn1");
    write_checkpoint_file(&out.network.snapshot(), &path).unwrap();
    let state = read_checkpoint_file(&path).unwrap();
    let total: usize = state.layers.iter().map(|l| l.weights.len()).sum();
    let nonzero: usize = state.layers.iter().map(|l| l.mask.iter().filter(|&&m| m).count()).sum();
    assert_eq!(report.compression_rate, total as f64 / nonzero as f64);
}

#[test]
fn candidate_replay_matches_the_applied_round() {
    // with eval epochs equal to the full fine-tune, the network after round 1
    // is exactly the best candidate's evaluation
    let (cfg, net, task) = quick(5);
    let cfg = FinePruneConfig {
        eval_epochs: 3,
        finetune_epochs: 3,
        max_rounds: 1,
        ..cfg
    };
    let mut records = Vec::new();
    let out = run_fineprune(&cfg, &net, &task, |r| {
        records.push(r.clone());
        Ok(())
    })
    .unwrap();
    let best = fineprune::bo::incumbent(&records).unwrap();
    let round = &out.report.rounds[0];
    assert_eq!(round.eps_val, best.eps);
    assert_eq!(round.s, best.s);
    assert_eq!(round.best_l, Some(best.l));
}

#[test]
fn zero_threshold_bounds_reduce_to_fine_tuning() {
    let (cfg, net, task) = quick(6);
    let cfg = FinePruneConfig {
        bounds: PruningBounds {
            a_max: 0.0,
            ..PruningBounds::default()
        },
        ..cfg
    };
    let out = run_fineprune(&cfg, &net, &task, |_| Ok(())).unwrap();
    assert_eq!(out.report.compression_rate, 1.0);
    assert!(out.report.rounds.iter().all(|r| r.s == 0.0));
}

#[test]
fn baselines() {
    let (cfg, net, task) = quick(7);
    let ft = run_baseline(Mode::FinetuneOnly, &cfg, &net, &task, |_| {
        panic!("no evaluations expected")
    })
    .unwrap();
    assert_eq!(ft.report.compression_rate, 1.0);
    assert_eq!(ft.report.evaluations, 0);
    assert!(ft.network.layers().iter().all(|l| l.mask.iter().all(|&m| m)));
    assert!(ft.report.rounds.iter().all(|r| r.s == 0.0 && r.best_params.is_none()));

    let ind = run_baseline(Mode::Independent, &cfg, &net, &task, |_| Ok(())).unwrap();
    assert_eq!(ind.report.rounds.len(), 1);
    assert_eq!(ind.report.mode, Mode::Independent);

    // the independent baseline is the first fine-pruning round
    let fp = run_fineprune(
        &FinePruneConfig {
            max_rounds: 1,
            ..cfg.clone()
        },
        &net,
        &task,
        |_| Ok(()),
    )
    .unwrap();
    assert_eq!(fp.report.rounds, ind.report.rounds);
    assert_eq!(ft.report.initial, fp.report.initial);

    assert!(run_baseline(Mode::Fineprune, &cfg, &net, &task, |_| Ok(())).is_err());
}

#[test]
fn sink_failure_yields_a_partial_report() {
    let (cfg, net, task) = quick(8);
    let mut seen = 0;
    let out = run_fineprune(&cfg, &net, &task, |r| {
        seen += 1;
        if r.round == 2 {
            Err(fineprune::Error::State("disk full".into()))
        } else {
            Ok(())
        }
    })
    .unwrap();
    // round 2 always runs: early stopping needs two finished rounds
    assert_eq!(seen, out.report.rounds[0].evaluations + 1);
    assert!(!out.report.complete);
    assert!(out.report.error.as_deref().unwrap().contains("disk full"));
    assert_eq!(out.report.rounds.len(), 1);
}

#[test]
fn lambda_selection_with_a_single_value() {
    let (cfg, net, task) = quick(9);
    let sel = select_lambda(&[1.0], &cfg, &net, &task).unwrap();
    assert_eq!(sel.lambda, 1.0);
    assert_eq!(sel.runs.len(), 1);
    assert!(select_lambda(&[], &cfg, &net, &task).is_err());
}

fn fake(eps_val: f64, compression: f64, template: &RunReport) -> RunReport {
    let mut r = template.clone();
    r.rounds.clear();
    r.initial.eps_val = eps_val;
    r.compression_rate = compression;
    r
}

#[test]
fn lambda_selection_filters_then_maximizes() {
    let (cfg, net, task) = quick(10);
    let t = run_baseline(
        Mode::FinetuneOnly,
        &FinePruneConfig { max_rounds: 1, ..cfg },
        &net,
        &task,
        |_| Ok(()),
    )
    .unwrap()
    .report;
    let within = fake(0.11, 5.0, &t);
    let outside = fake(0.2, 50.0, &t);
    assert_eq!(pick_lambda(&[(0.5, &outside), (1.0, &within)], 0.1, 0.02), 1.0);
    // no run qualifies: smallest validation error wins
    let worse = fake(0.3, 80.0, &t);
    assert_eq!(pick_lambda(&[(0.5, &worse), (2.0, &outside)], 0.0, 0.02), 2.0);
    // ties keep the earlier value
    let twin = fake(0.11, 5.0, &t);
    assert_eq!(pick_lambda(&[(0.5, &within), (1.0, &twin)], 0.1, 0.02), 0.5);
}

#[test]
fn lambda_grid_on_the_desk_task() {
    let (cfg, net, task) = task_from("log.timing = false", 0);
    let grid = [0.5, 1.0, 2.0];
    let sel = select_lambda(&grid, &cfg.fineprune, &net, &task).unwrap();
    let reference = sel.reference.last().eps_val;
    let ok: Vec<(f64, f64)> = sel
        .runs
        .iter()
        .filter(|(_, o, _)| o.report.last().eps_val - reference <= cfg.fineprune.tau)
        .map(|(l, o, _)| (*l, o.report.compression_rate))
        .collect();
    if !ok.is_empty() {
        let best = ok.iter().cloned().fold(ok[0], |b, c| if c.1 > b.1 { c } else { b });
        assert_eq!(sel.lambda, best.0);
    }
}
