//! Whole-loop properties on the synthetic fixture, which trains in
//! milliseconds.

use daic::cli::config::{DatasetKind, ExperimentConfig};
use daic::cli::report::records_csv;
use daic::cycle::{run_experiment_on, CycleRecord, PolicyApplied, ReportedTruth, RunOptions};
use daic::dataset::LabeledSet;

fn synthetic_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.kind = DatasetKind::Synthetic;
    cfg.repetitions = 3;
    cfg.master_seed = seed;
    cfg.train.epochs = 10;
    cfg.forest.n_trees = 20;
    cfg
}

fn pool(cfg: &ExperimentConfig) -> LabeledSet {
    cfg.dataset.load().unwrap()
}

fn run(cfg: &ExperimentConfig, options: RunOptions) -> Vec<CycleRecord> {
    run_experiment_on(&pool(cfg), cfg, &options).unwrap().records
}

#[test]
fn records_cover_every_cycle_and_repetition() {
    let cfg = synthetic_config(1);
    let records = run(&cfg, RunOptions::default());
    assert_eq!(records.len(), cfg.cycles * cfg.repetitions);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.repetition, i / cfg.cycles + 1);
        assert_eq!(r.cycle, i % cfg.cycles + 1);
        assert_eq!(r.estimated_acc.is_some(), r.triggered);
        assert_eq!(r.n_labeled, if r.triggered { cfg.sampling.budget } else { 0 });
    }
    assert!(records
        .iter()
        .all(|r| r.cycle != 1 || r.policy_applied == PolicyApplied::Initial));
}

#[test]
fn same_seed_gives_identical_csv() {
    let cfg = synthetic_config(7);
    let a = records_csv(&run(&cfg, RunOptions::default()));
    let b = records_csv(&run(&cfg, RunOptions::default()));
    assert_eq!(a, b);

    let mut serial = cfg.clone();
    serial.parallel = false;
    assert_eq!(a, records_csv(&run(&serial, RunOptions::default())));

    let other = records_csv(&run(&synthetic_config(8), RunOptions::default()));
    assert_ne!(a, other);
}

#[test]
fn perturbed_truth_changes_only_actual_accuracy() {
    let cfg = synthetic_config(3);
    let exact = run(&cfg, RunOptions::default());
    let perturbed = run(
        &cfg,
        RunOptions {
            reported_truth: ReportedTruth::Perturbed {
                fraction: 0.3,
                seed: 99,
            },
        },
    );
    assert!(exact.iter().any(|r| r.triggered));
    let mut changed = 0;
    for (e, p) in exact.iter().zip(&perturbed) {
        let blank = |r: &CycleRecord| CycleRecord {
            actual_acc: 0.0,
            ..r.clone()
        };
        assert_eq!(blank(e), blank(p));
        changed += usize::from(e.actual_acc != p.actual_acc);
    }
    assert!(changed > 0);
}

#[test]
fn replace_policy_follows_k_consecutive_triggers() {
    let mut cfg = synthetic_config(5);
    cfg.retrain.k = 1;
    let records = run(&cfg, RunOptions::default());
    for rep in records.chunks(cfg.cycles) {
        for w in rep.windows(2) {
            if w[0].triggered {
                assert_eq!(w[1].policy_applied, PolicyApplied::Replace, "{:?}", w[1]);
            } else {
                assert_ne!(w[1].policy_applied, PolicyApplied::Replace);
            }
        }
    }
}
