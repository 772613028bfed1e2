//! The assessment and improvement loop.
//!
//! Each cycle runs, in order: data preprocessing, (re)training, verification,
//! deployment on a fresh operational batch, prediction, pseudo-oracle
//! judging, trigger evaluation and, when triggered, sampling-based
//! assessment whose labels feed the next cycle's preprocessing.
//!
//! Ground truth of the operational batch is touched in two places only: the
//! simulated human labeling of sampled units, and the `actual_acc` column
//! reported for analysis. No control-flow decision reads the latter.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cli::config::ExperimentConfig;
use crate::dataset::{self, Example, LabeledSet, Role, Splits};
use crate::error::{Error, Result};
use crate::estimator::{self, SampledUnit};
use crate::model::{self, NetworkParams, Prediction};
use crate::oracle::{self, DomainInvariant, Invariants, MinerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TriggerPolicy {
    pub divergence_threshold: f64,
    pub minimum_accuracy: f64,
}

impl Default for TriggerPolicy {
    fn default() -> Self {
        TriggerPolicy {
            divergence_threshold: 0.05,
            minimum_accuracy: 0.80,
        }
    }
}

/// Offline assessment is needed when the online estimate falls more than the
/// threshold below verification accuracy, or below the required minimum.
pub fn evaluate_trigger(policy: &TriggerPolicy, verification_acc: f64, predicted_acc: f64) -> bool {
    predicted_acc < verification_acc - policy.divergence_threshold || predicted_acc < policy.minimum_accuracy
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainMode {
    /// New labels are added to the existing sets; the model is fine-tuned.
    Append,
    /// Like `Append`, but after `k` consecutive triggered cycles the model is
    /// re-initialized and trained only on the labels those cycles collected.
    #[default]
    ReplaceAfterK,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrainPolicy {
    pub mode: RetrainMode,
    pub k: usize,
    /// Share of new labels routed to training; the rest go to verification.
    pub new_label_split: f64,
}

impl Default for RetrainPolicy {
    fn default() -> Self {
        RetrainPolicy {
            mode: RetrainMode::ReplaceAfterK,
            k: 3,
            new_label_split: 0.8,
        }
    }
}

/// What the preprocessing phase did at the start of a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyApplied {
    /// First training from scratch.
    Initial,
    /// No new labels; deployed model kept.
    None,
    Append,
    Replace,
}

impl PolicyApplied {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyApplied::Initial => "initial",
            PolicyApplied::None => "none",
            PolicyApplied::Append => "append",
            PolicyApplied::Replace => "replace",
        }
    }
}

impl fmt::Display for PolicyApplied {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyApplied {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => Ok(PolicyApplied::Initial),
            "none" => Ok(PolicyApplied::None),
            "append" => Ok(PolicyApplied::Append),
            "replace" => Ok(PolicyApplied::Replace),
            other => Err(Error::Format(format!("unknown policy `{other}`"))),
        }
    }
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq)]
pub struct CycleRecord {
    pub cycle: usize,
    pub repetition: usize,
    pub verification_acc: f64,
    pub actual_acc: f64,
    pub predicted_acc: f64,
    /// Present iff `triggered`.
    pub estimated_acc: Option<f64>,
    pub triggered: bool,
    pub n_labeled: usize,
    pub policy_applied: PolicyApplied,
}

/// Splits the new labels `split : 1 - split` into train and verification and
/// appends them. Order of `new_labels` is shuffled with `seed` first.
fn split_new_labels(new_labels: &[Example], split: f64, seed: u64) -> (Vec<Example>, Vec<Example>) {
    let mut shuffled = new_labels.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((shuffled.len() as f64) * split).round() as usize;
    let verification = shuffled.split_off(n_train.min(shuffled.len()));
    (shuffled, verification)
}

/// Outcome of the preprocessing phase.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub train: LabeledSet,
    pub verification: LabeledSet,
    pub applied: PolicyApplied,
}

/// Updates the training and verification sets with newly labeled
/// operational examples.
///
/// `recent` holds the labels of the most recent consecutive triggered cycles
/// (newest last), including `new_labels`. With `ReplaceAfterK` and at least
/// `k` consecutive triggers, the sets are rebuilt from the last `k` entries of
/// `recent` alone.
pub fn preprocess_data(
    train: &LabeledSet,
    verification: &LabeledSet,
    new_labels: &[Example],
    recent: &[Vec<Example>],
    policy: &RetrainPolicy,
    consecutive_triggers: usize,
    seed: u64,
) -> Result<Preprocessed> {
    if new_labels.is_empty() {
        return Ok(Preprocessed {
            train: train.clone(),
            verification: verification.clone(),
            applied: PolicyApplied::None,
        });
    }
    if policy.mode == RetrainMode::ReplaceAfterK && consecutive_triggers >= policy.k {
        let pool: Vec<Example> = recent[recent.len().saturating_sub(policy.k)..]
            .iter()
            .flatten()
            .cloned()
            .collect();
        let (t, v) = split_new_labels(&pool, policy.new_label_split, seed);
        return Ok(Preprocessed {
            train: LabeledSet::new(t, Role::Train)?,
            verification: LabeledSet::new(v, Role::Verification)?,
            applied: PolicyApplied::Replace,
        });
    }
    let (t, v) = split_new_labels(new_labels, policy.new_label_split, seed);
    let mut train = train.clone();
    let mut verification = verification.clone();
    train.examples.extend(t);
    verification.examples.extend(v);
    Ok(Preprocessed {
        train: LabeledSet::new(train.examples, Role::Train)?,
        verification: LabeledSet::new(verification.examples, Role::Verification)?,
        applied: PolicyApplied::Append,
    })
}

/// How the reported ground truth is derived from the operational batch.
/// Perturbation exists to check that reporting cannot leak into control flow.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum ReportedTruth {
    #[default]
    Exact,
    /// Replace a `fraction` of reported labels by uniformly random classes.
    Perturbed { fraction: f64, seed: u64 },
}

impl ReportedTruth {
    fn labels(&self, batch: &[Example]) -> Result<Vec<u8>> {
        let mut labels = batch.iter().map(Example::label).collect::<Result<Vec<_>>>()?;
        if let ReportedTruth::Perturbed { fraction, seed } = *self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for l in &mut labels {
                if rng.gen::<f64>() < fraction {
                    *l = rng.gen_range(0..dataset::N_CLASSES as u8);
                }
            }
        }
        Ok(labels)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    pub reported_truth: ReportedTruth,
}

/// Rules active in one cycle, for export.
#[derive(Clone, Debug, PartialEq)]
pub struct RuleSnapshot {
    pub repetition: usize,
    pub cycle: usize,
    pub text: String,
}

/// Everything one repetition carries from cycle to cycle.
#[derive(Clone, Debug)]
pub struct CycleState {
    pub repetition: usize,
    seed: u64,
    pub train: LabeledSet,
    pub verification: LabeledSet,
    pub operational_pool: LabeledSet,
    pub params: Option<NetworkParams>,
    pub invariants: Option<Invariants>,
    pub verification_acc: f64,
    /// Labeled examples from the last triggered cycle, not yet used.
    pending: Vec<Example>,
    /// Labels per consecutive triggered cycle, newest last.
    recent: Vec<Vec<Example>>,
    consecutive_triggers: usize,
    pub rule_snapshots: Vec<RuleSnapshot>,
}

/// Streams of seeds; each (purpose, cycle) pair gets an independent value.
fn derive_seed(base: u64, purpose: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a mixed key
    let mut z = base
        .wrapping_add(purpose.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const SEED_SPLIT: u64 = 1;
const SEED_TRAIN: u64 = 2;
const SEED_FOREST: u64 = 3;
const SEED_BATCH: u64 = 4;
const SEED_SAMPLE: u64 = 5;
const SEED_PREPROCESS: u64 = 6;

pub fn repetition_seed(master_seed: u64, repetition: usize) -> u64 {
    derive_seed(master_seed, 0, repetition as u64)
}

impl CycleState {
    pub fn new(pool: &LabeledSet, config: &ExperimentConfig, repetition: usize) -> Result<Self> {
        let seed = repetition_seed(config.master_seed, repetition);
        let Splits {
            train,
            verification,
            operational_pool,
        } = dataset::make_splits(
            pool,
            config.dataset.split_sizes(config.cycles),
            derive_seed(seed, SEED_SPLIT, 0),
        )?;
        Ok(CycleState {
            repetition,
            seed,
            train,
            verification,
            operational_pool,
            params: None,
            invariants: None,
            verification_acc: 0.0,
            pending: Vec::new(),
            recent: Vec::new(),
            consecutive_triggers: 0,
            rule_snapshots: Vec::new(),
        })
    }

    pub fn consecutive_triggers(&self) -> usize {
        self.consecutive_triggers
    }
}

fn phase<T>(cycle: usize, name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Phase {
        cycle,
        phase: name,
        source: Box::new(e),
    })
}

/// Runs one cycle (1-based) and advances `state`.
pub fn run_cycle(
    state: &mut CycleState,
    cycle: usize,
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<CycleRecord> {
    let seed = |purpose| derive_seed(state.seed, purpose, cycle as u64);

    // 1. Data preprocessing
    let applied = if cycle == 1 || state.params.is_none() {
        PolicyApplied::Initial
    } else {
        let pre = phase(
            cycle,
            "preprocess",
            preprocess_data(
                &state.train,
                &state.verification,
                &state.pending,
                &state.recent,
                &config.retrain,
                state.consecutive_triggers,
                seed(SEED_PREPROCESS),
            ),
        )?;
        state.train = pre.train;
        state.verification = pre.verification;
        state.pending.clear();
        if pre.applied == PolicyApplied::Replace {
            state.recent.clear();
            state.consecutive_triggers = 0;
        }
        pre.applied
    };

    // 2-3. (Re)training and verification, then rebuild invariants.
    if applied != PolicyApplied::None {
        let mut train_cfg = config.train.clone();
        train_cfg.seed = seed(SEED_TRAIN);
        let init = match applied {
            PolicyApplied::Append => state.params.as_ref(),
            _ => None,
        };
        let params = phase(cycle, "train", model::train(&state.train, &train_cfg, init))?;
        state.verification_acc = phase(cycle, "verify", model::accuracy(&params, &state.verification.examples))?;
        let invariants = phase(
            cycle,
            "invariants",
            Invariants::build(
                DomainInvariant::new(config.forms()),
                &state.train.examples,
                &state.verification.examples,
                &params,
                MinerConfig::from(config.rules),
                config.forest,
                seed(SEED_FOREST),
            ),
        )?;
        state.rule_snapshots.push(RuleSnapshot {
            repetition: state.repetition,
            cycle,
            text: invariants.rules_text(),
        });
        state.params = Some(params);
        state.invariants = Some(invariants);
    }
    let params = state.params.as_ref().expect("trained in cycle 1");
    let invariants = state.invariants.as_ref().expect("built with the model");

    // 4-5. Deploy and monitor.
    let batch = phase(
        cycle,
        "deploy",
        dataset::draw_operational_batch(
            &state.operational_pool,
            cycle,
            config.dataset.batch_size,
            &config.shift,
            &config.forms(),
            seed(SEED_BATCH),
        ),
    )?;
    let preds: Vec<Prediction> = phase(cycle, "monitor", model::predict_batch(params, &batch))?;

    // 6. Pseudo-oracle.
    let verdicts = phase(
        cycle,
        "oracle",
        invariants.judge_batch(config.oracle, params, &batch, &preds),
    )?;
    let predicted_acc = phase(cycle, "oracle", oracle::predicted_accuracy(&verdicts))?;

    // 7. Evaluation.
    let triggered = evaluate_trigger(&config.trigger, state.verification_acc, predicted_acc);

    // 8. Sampling-based assessment.
    let mut estimated_acc = None;
    let mut n_labeled = 0;
    if triggered {
        let mut plan = config.sampling.clone();
        plan.seed = seed(SEED_SAMPLE);
        let mut units: Vec<SampledUnit> = phase(cycle, "sample", estimator::draw_sample(&preds, &plan))?;
        // The human labeler sees the batch's true labels.
        let truth: Vec<Option<u8>> = batch.iter().map(|e| e.true_label).collect();
        phase(cycle, "label", estimator::label_units(&mut units, &truth))?;
        let estimate = phase(cycle, "estimate", estimator::estimate_accuracy(&units))?;
        estimated_acc = Some(estimate.point);
        n_labeled = estimate.n_labeled;
        let labeled: Vec<Example> = units.iter().map(|u| batch[u.index].clone()).collect();
        state.pending = labeled.clone();
        state.recent.push(labeled);
        state.consecutive_triggers += 1;
        if state.recent.len() > config.retrain.k {
            state.recent.remove(0);
        }
    } else {
        state.pending.clear();
        state.recent.clear();
        state.consecutive_triggers = 0;
    }

    // Reporting only.
    let reported = phase(cycle, "report", options.reported_truth.labels(&batch))?;
    let correct = preds.iter().zip(&reported).filter(|(p, &l)| p.label == l).count();
    let actual_acc = correct as f64 / batch.len() as f64;

    Ok(CycleRecord {
        cycle,
        repetition: state.repetition,
        verification_acc: state.verification_acc,
        actual_acc,
        predicted_acc,
        estimated_acc,
        triggered,
        n_labeled,
        policy_applied: applied,
    })
}

/// All records of one repetition plus its rule snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct RepetitionOutput {
    pub records: Vec<CycleRecord>,
    pub rule_snapshots: Vec<RuleSnapshot>,
}

pub fn run_repetition(
    pool: &LabeledSet,
    config: &ExperimentConfig,
    repetition: usize,
    options: &RunOptions,
) -> Result<RepetitionOutput> {
    let mut state = CycleState::new(pool, config, repetition)?;
    let records = (1..=config.cycles)
        .map(|cycle| run_cycle(&mut state, cycle, config, options))
        .collect::<Result<Vec<_>>>()?;
    Ok(RepetitionOutput {
        records,
        rule_snapshots: state.rule_snapshots,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentOutput {
    pub records: Vec<CycleRecord>,
    pub rule_snapshots: Vec<RuleSnapshot>,
}

/// Runs every repetition on an already loaded pool.
pub fn run_experiment_on(
    pool: &LabeledSet,
    config: &ExperimentConfig,
    options: &RunOptions,
) -> Result<ExperimentOutput> {
    config.validate()?;
    let needed =
        config.dataset.train_size + config.dataset.verification_size + config.cycles * config.dataset.batch_size;
    if pool.len() < needed {
        return Err(Error::Capacity {
            needed,
            available: pool.len(),
        });
    }
    let run = |rep| run_repetition(pool, config, rep, options);
    let outputs: Vec<RepetitionOutput> = if config.parallel {
        (1..=config.repetitions)
            .into_par_iter()
            .map(run)
            .collect::<Result<_>>()?
    } else {
        (1..=config.repetitions).map(run).collect::<Result<_>>()?
    };
    let mut out = ExperimentOutput {
        records: Vec::with_capacity(config.cycles * config.repetitions),
        rule_snapshots: Vec::new(),
    };
    for rep in outputs {
        out.records.extend(rep.records);
        out.rule_snapshots.extend(rep.rule_snapshots);
    }
    Ok(out)
}

/// Loads the configured dataset and runs the experiment.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    config.validate()?;
    let pool = config.dataset.load()?;
    run_experiment_on(&pool, config, &RunOptions::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_generate, FormSpec};

    #[test]
    fn trigger_examples() {
        let p = TriggerPolicy::default();
        assert!(!evaluate_trigger(&p, 0.861, 0.833));
        assert!(evaluate_trigger(&p, 0.861, 0.678));
        assert!(!evaluate_trigger(&p, 0.861, 0.868));
    }

    #[test]
    fn trigger_clause_combinations() {
        let p = TriggerPolicy::default();
        // neither clause
        assert!(!evaluate_trigger(&p, 0.86, 0.85));
        // divergence only
        assert!(evaluate_trigger(&p, 0.95, 0.85));
        // minimum only
        assert!(evaluate_trigger(&p, 0.80, 0.79));
        // both
        assert!(evaluate_trigger(&p, 0.90, 0.70));
        // strict inequalities at the boundaries
        assert!(!evaluate_trigger(&p, 0.90, 0.85 + 1e-12));
        assert!(!evaluate_trigger(&p, 0.81, 0.80));
    }

    fn labeled(n: usize, offset: usize) -> Vec<Example> {
        let forms = FormSpec::default();
        (0..n)
            .map(|i| Example {
                id: offset + i,
                pixels: vec![0.0; 4].into(),
                true_label: Some((i % 10) as u8),
                form: forms.form_of((i % 10) as u8),
                origin_cycle: 4,
            })
            .collect()
    }

    fn set(n: usize, role: Role) -> LabeledSet {
        LabeledSet::new(labeled(n, 100_000), role).unwrap()
    }

    #[test]
    fn preprocess_identity_without_labels() {
        let (t, v) = (set(10, Role::Train), set(5, Role::Verification));
        let out = preprocess_data(&t, &v, &[], &[], &RetrainPolicy::default(), 0, 1).unwrap();
        assert_eq!(out.train, t);
        assert_eq!(out.verification, v);
        assert_eq!(out.applied, PolicyApplied::None);
    }

    #[test]
    fn preprocess_append_split() {
        let (t, v) = (set(1000, Role::Train), set(500, Role::Verification));
        let new = labeled(500, 0);
        let policy = RetrainPolicy {
            mode: RetrainMode::Append,
            ..RetrainPolicy::default()
        };
        let out = preprocess_data(&t, &v, &new, std::slice::from_ref(&new), &policy, 1, 1).unwrap();
        assert_eq!(out.train.len(), 1400);
        assert_eq!(out.verification.len(), 600);
        assert_eq!(out.applied, PolicyApplied::Append);
    }

    #[test]
    fn preprocess_replace_after_three() {
        let (t, v) = (set(1000, Role::Train), set(500, Role::Verification));
        let recent = vec![labeled(500, 0), labeled(500, 500), labeled(500, 1000)];
        let out = preprocess_data(&t, &v, &recent[2], &recent, &RetrainPolicy::default(), 3, 1).unwrap();
        assert_eq!(out.train.len(), 1200);
        assert_eq!(out.verification.len(), 300);
        assert_eq!(out.applied, PolicyApplied::Replace);
        assert!(out.train.examples.iter().all(|e| e.id < 1500));

        // fewer than k consecutive triggers behaves as append
        let out = preprocess_data(&t, &v, &recent[1], &recent[..2], &RetrainPolicy::default(), 2, 1).unwrap();
        assert_eq!(out.applied, PolicyApplied::Append);
        assert_eq!(out.train.len(), 1400);
    }

    fn small_config() -> ExperimentConfig {
        let mut cfg = ExperimentConfig {
            cycles: 2,
            repetitions: 1,
            ..ExperimentConfig::default()
        };
        cfg.dataset.train_size = 300;
        cfg.dataset.verification_size = 150;
        cfg.dataset.batch_size = 200;
        cfg.sampling.budget = 100;
        cfg.train.epochs = 3;
        cfg.forest.n_trees = 10;
        cfg.shift.start_cycle = 2;
        cfg
    }

    #[test]
    fn one_cycle_one_record() {
        let pool = synth_generate(1000, 10, 0.5, 1).unwrap();
        let mut cfg = small_config();
        cfg.cycles = 1;
        let out = run_experiment_on(&pool, &cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.records.len(), 1);
        let r = &out.records[0];
        assert_eq!((r.cycle, r.repetition), (1, 1));
        assert_eq!(r.policy_applied, PolicyApplied::Initial);
        assert_eq!(r.estimated_acc.is_some(), r.triggered);
    }

    #[test]
    fn capacity_checked_up_front() {
        let pool = synth_generate(500, 10, 0.5, 1).unwrap();
        let err = run_experiment_on(&pool, &small_config(), &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Capacity { .. }));
    }

    #[test]
    fn seeds_are_distinct() {
        let a = derive_seed(1, SEED_TRAIN, 1);
        let b = derive_seed(1, SEED_TRAIN, 2);
        let c = derive_seed(1, SEED_FOREST, 1);
        let d = derive_seed(2, SEED_TRAIN, 1);
        assert!(a != b && a != c && a != d && b != c);
    }
}
