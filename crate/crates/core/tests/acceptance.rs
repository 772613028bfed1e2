//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. Run with `cargo test --test acceptance`.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use daic::cli::config::ExperimentConfig;
use daic::cli::report::records_csv;
use daic::cycle::{run_experiment_on, CycleRecord, ExperimentOutput, ReportedTruth, RunOptions};
use daic::dataset::{LabeledSet, ShiftSpec};
use daic::estimator::{draw_sample, estimate_accuracy, label_units, SamplingPlan};
use daic::model::{self, NetworkParams};
use daic::oracle::rules::{self, binarize, MinerConfig, MIN_CONFIDENCE, MIN_SUPPORT};
use daic::oracle::{failure_flags, OracleMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, id: u32, name: &str, ok: bool, detail: String) {
        println!("{} criterion {id} ({name}): {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures += 1;
        }
    }
}

fn timed_run(pool: &LabeledSet, cfg: &ExperimentConfig, options: RunOptions) -> (ExperimentOutput, Duration) {
    let start = Instant::now();
    let out = run_experiment_on(pool, cfg, &options).expect("experiment run");
    (out, start.elapsed())
}

fn at_cycle(records: &[CycleRecord], cycle: usize) -> Vec<&CycleRecord> {
    records.iter().filter(|r| r.cycle == cycle).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn nominal_tracking(r: &mut Report, records: &[CycleRecord], reps: usize, elapsed: Duration) {
    let nominal: Vec<_> = records.iter().filter(|x| x.cycle <= 3).collect();
    let quiet_reps = (1..=reps)
        .filter(|rep| nominal.iter().all(|x| x.repetition != *rep || !x.triggered))
        .count();
    let gap = (1..=3)
        .map(|c| {
            let rows = at_cycle(records, c);
            (mean(rows.iter().map(|x| x.predicted_acc)) - mean(rows.iter().map(|x| x.actual_acc))).abs()
        })
        .fold(0.0, f64::max);
    let actual = mean(nominal.iter().map(|x| x.actual_acc));
    let predicted = mean(nominal.iter().map(|x| x.predicted_acc));
    r.check(
        1,
        "nominal tracking",
        quiet_reps >= 4 && gap <= 0.05 && elapsed.as_secs_f64() <= 120.0,
        format!(
            "untriggered reps {quiet_reps}/{reps}, actual {actual:.3}, predicted {predicted:.3}, \
             max |pred-actual| {gap:.3}, full run {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

fn shift_detection(r: &mut Report, records: &[CycleRecord], shift: &ShiftSpec) {
    let rows = at_cycle(records, shift.start_cycle);
    let actual = mean(rows.iter().map(|x| x.actual_acc));
    let triggered = rows.iter().filter(|x| x.triggered).count();
    let worst = rows
        .iter()
        .filter_map(|x| x.estimated_acc.map(|e| (e - x.actual_acc).abs()))
        .fold(0.0, f64::max);
    let estimate = mean(rows.iter().filter_map(|x| x.estimated_acc));
    r.check(
        2,
        "shift detection",
        (actual - 0.70).abs() <= 0.07 && triggered >= 4 && worst <= 0.05,
        format!(
            "cycle {} actual {actual:.3}, triggered {triggered}/{}, mean estimate {estimate:.3}, \
             worst |est-actual| {worst:.3}",
            shift.start_cycle,
            rows.len()
        ),
    );
}

fn baseline_blindness(r: &mut Report, records: &[CycleRecord], shift: &ShiftSpec) {
    let triggered = records.iter().filter(|x| x.triggered).count();
    let post: Vec<_> = records.iter().filter(|x| x.cycle >= shift.start_cycle).collect();
    let min_pred = post.iter().map(|x| x.predicted_acc).fold(f64::INFINITY, f64::min);
    let max_actual = post.iter().map(|x| x.actual_acc).fold(0.0, f64::max);
    r.check(
        3,
        "baseline blindness",
        triggered == 0 && min_pred >= 0.84 && max_actual <= 0.77,
        format!("triggers {triggered}, post-shift min predicted {min_pred:.3}, max actual {max_actual:.3}"),
    );
}

fn recovery(r: &mut Report, records: &[CycleRecord], shift: &ShiftSpec, elapsed: Duration) {
    let base = mean(at_cycle(records, shift.start_cycle).iter().map(|x| x.actual_acc));
    let late: Vec<f64> = [7, 8]
        .iter()
        .map(|&c| mean(at_cycle(records, c).iter().map(|x| x.actual_acc)))
        .collect();
    let late_triggers = records.iter().filter(|x| x.cycle >= 7 && x.triggered).count();
    r.check(
        4,
        "recovery",
        late.iter().all(|&a| a >= base + 0.10) && late_triggers == 0 && elapsed.as_secs_f64() <= 600.0,
        format!(
            "cycle {} actual {base:.3}, cycles 7/8 actual {:.3}/{:.3}, late triggers {late_triggers}, \
             single-threaded run {:.1}s",
            shift.start_cycle,
            late[0],
            late[1],
            elapsed.as_secs_f64()
        ),
    );
}

fn estimator_unbiasedness(r: &mut Report) {
    let (preds, truth) = common::correlated_population(1000, 0.70, 42);
    let reps = 500;
    let mut total = 0.0;
    for seed in 0..reps {
        let plan = SamplingPlan {
            seed,
            ..SamplingPlan::default()
        };
        let mut units = draw_sample(&preds, &plan).unwrap();
        label_units(&mut units, &truth).unwrap();
        total += estimate_accuracy(&units).unwrap().point;
    }
    let mc_mean = total / reps as f64;

    let census_plan = SamplingPlan {
        budget: 1000,
        ..SamplingPlan::default()
    };
    let mut units = draw_sample(&preds, &census_plan).unwrap();
    label_units(&mut units, &truth).unwrap();
    let census_err = (estimate_accuracy(&units).unwrap().point - 0.70).abs();

    let srs_plan = SamplingPlan {
        random_fraction: 1.0,
        seed: 3,
        ..SamplingPlan::default()
    };
    let mut units = draw_sample(&preds, &srs_plan).unwrap();
    label_units(&mut units, &truth).unwrap();
    let sample_mean = units.iter().filter(|u| u.correct == Some(true)).count() as f64 / units.len() as f64;
    let srs_err = (estimate_accuracy(&units).unwrap().point - sample_mean).abs();

    r.check(
        5,
        "estimator unbiasedness",
        (mc_mean - 0.70).abs() <= 0.02 && census_err < 1e-12 && srs_err <= 1e-12,
        format!("mean of {reps} estimates {mc_mean:.4}, census error {census_err:.1e}, SRS error {srs_err:.1e}"),
    );
}

fn rule_soundness(r: &mut Report, runs: &[&ExperimentOutput]) {
    let shift = ShiftSpec::default();
    let mut emitted = 0;
    let mut sound = 0;
    for seed in 1..=5u64 {
        let (splits, params) = common::trained_mnist(seed);
        // the trained model is perfect on its own training set, so mine on
        // the label-swapped copy where it fails on a recognizable subset
        let extraction: Vec<_> = splits
            .train
            .examples
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.true_label = Some(shift.apply(e.true_label.unwrap()));
                e
            })
            .collect();
        let fails = failure_flags(&extraction, &model::predict_batch(&params, &extraction).unwrap()).unwrap();
        let found = rules::extract_rules(&extraction, &fails, MinerConfig::default()).unwrap();
        let images: Vec<_> = extraction.iter().map(|e| binarize(&e.pixels).unwrap()).collect();
        emitted += found.len();
        sound += found
            .iter()
            .filter(|rule| {
                let (conf, supp) = rules::rescore(rule, &images, &fails);
                conf >= MIN_CONFIDENCE && supp >= MIN_SUPPORT
            })
            .count();
    }
    let in_runs: usize = runs
        .iter()
        .flat_map(|o| &o.rule_snapshots)
        .map(|s| s.text.lines().count())
        .sum();
    r.check(
        6,
        "rule-filter soundness",
        emitted > 0 && sound == emitted,
        format!("{sound}/{emitted} rules re-verify across 5 seeds ({in_runs} rule lines exported by the runs)"),
    );
}

fn gradient_check(r: &mut Report) {
    let data = daic::dataset::synth_generate(40, 10, 0.5, 3).unwrap();
    let x = common::design_matrix(&data.examples);
    let labels = data.labels();
    let dim = x.ncols();
    let h = 1e-4;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    let mut per_seed_ok = true;
    for seed in [1u64, 2, 3] {
        let params = NetworkParams::init(dim, seed);
        let (_, grad) = params.loss_and_gradient(x.view(), &labels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut here = 0;
        for _ in 0..40 {
            let (i, j) = (rng.gen_range(0..model::HIDDEN), rng.gen_range(0..dim));
            let (k, l) = (rng.gen_range(0..10), rng.gen_range(0..model::HIDDEN));
            for (analytic, bump) in [
                (
                    grad.w1[[i, j]],
                    Box::new(move |p: &mut NetworkParams, d| p.w1[[i, j]] += d) as Box<dyn Fn(&mut NetworkParams, f64)>,
                ),
                (
                    grad.w2[[k, l]],
                    Box::new(move |p: &mut NetworkParams, d| p.w2[[k, l]] += d),
                ),
            ] {
                if analytic.abs() < 1e-7 {
                    continue;
                }
                let (mut plus, mut minus) = (params.clone(), params.clone());
                bump(&mut plus, h);
                bump(&mut minus, -h);
                let numeric = (plus.loss(x.view(), &labels) - minus.loss(x.view(), &labels)) / (2.0 * h);
                worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()));
                here += 1;
            }
        }
        per_seed_ok &= here >= 10;
        checked += here;
    }
    r.check(
        7,
        "gradient check",
        per_seed_ok && worst <= 1e-3,
        format!("{checked} coordinates over 3 seeds, worst relative error {worst:.2e}"),
    );
}

fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        cycles: 5,
        repetitions: 2,
        master_seed: 2024,
        ..ExperimentConfig::default()
    }
}

fn main() -> ExitCode {
    let mut r = Report { failures: 0 };
    let pool = common::mnist();

    let full = ExperimentConfig {
        parallel: false,
        ..ExperimentConfig::default()
    };
    let (dnn_os, dnn_os_time) = timed_run(&pool, &full, RunOptions::default());
    nominal_tracking(&mut r, &dnn_os.records, full.repetitions, dnn_os_time);
    shift_detection(&mut r, &dnn_os.records, &full.shift);

    let mut baseline_cfg = full.clone();
    baseline_cfg.oracle = OracleMode::Baseline;
    let (baseline, _) = timed_run(&pool, &baseline_cfg, RunOptions::default());
    baseline_blindness(&mut r, &baseline.records, &full.shift);
    recovery(&mut r, &dnn_os.records, &full.shift, dnn_os_time);

    estimator_unbiasedness(&mut r);
    rule_soundness(&mut r, &[&dnn_os, &baseline]);
    gradient_check(&mut r);

    let small = small_config();
    let (first, _) = timed_run(&pool, &small, RunOptions::default());
    let (second, _) = timed_run(&pool, &small, RunOptions::default());
    let (a, b) = (records_csv(&first.records), records_csv(&second.records));
    r.check(
        8,
        "determinism",
        a == b,
        format!("{} CSV bytes, identical: {}", a.len(), a == b),
    );

    let perturbed_opts = RunOptions {
        reported_truth: ReportedTruth::Perturbed {
            fraction: 0.25,
            seed: 5,
        },
    };
    let (perturbed, _) = timed_run(&pool, &small, perturbed_opts);
    let control = |x: &CycleRecord| (x.cycle, x.repetition, x.triggered, x.n_labeled, x.policy_applied);
    let same_control = first
        .records
        .iter()
        .map(control)
        .eq(perturbed.records.iter().map(control));
    let actual_moved = first
        .records
        .iter()
        .zip(&perturbed.records)
        .filter(|(x, y)| x.actual_acc != y.actual_acc)
        .count();
    let triggers = first.records.iter().filter(|x| x.triggered).count();
    r.check(
        9,
        "ground-truth isolation",
        same_control && actual_moved > 0 && triggers > 0,
        format!(
            "control columns unchanged: {same_control}, actual_acc changed in {actual_moved}/{} rows, {triggers} triggered rows",
            first.records.len()
        ),
    );

    if r.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} criteria failed", r.failures);
        ExitCode::FAILURE
    }
}
