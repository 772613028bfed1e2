//! Offline accuracy estimation from a labeled sample.
//!
//! The labeling budget is split in two phases. A fraction is drawn by simple
//! random sampling; the rest is drawn sequentially without replacement with
//! probability proportional to `1 - confidence`, so low-confidence (likely
//! failing) predictions are over-represented. The ratio estimator then
//! reweights every labeled unit by its inverse inclusion probability.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Prediction;

/// How a unit's inclusion probability is approximated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InclusionApprox {
    /// `pi = min(1, n1/N + n2 * w / W)`. Ignores depletion in the weighted
    /// phase, which over-weights high-confidence units.
    Linear,
    /// `pi = n1/N + (1 - n1/N) * (1 - exp(-lambda * w))`, with `lambda`
    /// chosen so the probabilities sum to the budget. First-order
    /// approximation for successive (exponential-key) sampling.
    #[default]
    Successive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingPlan {
    pub budget: usize,
    pub random_fraction: f64,
    pub weight_floor: f64,
    pub inclusion: InclusionApprox,
    /// Derived from the master seed in experiments; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SamplingPlan {
    fn default() -> Self {
        SamplingPlan {
            budget: 500,
            random_fraction: 0.5,
            weight_floor: 1e-6,
            inclusion: InclusionApprox::Successive,
            seed: 0,
        }
    }
}

impl SamplingPlan {
    /// `random_fraction = 1` is accepted and disables the weighted phase.
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::param("sampling.budget must be >= 1"));
        }
        if !(self.random_fraction > 0.0 && self.random_fraction <= 1.0) {
            return Err(Error::param("sampling.random_fraction must lie in (0, 1]"));
        }
        if !(self.weight_floor > 0.0 && self.weight_floor.is_finite()) {
            return Err(Error::param("sampling.weight_floor must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Census,
    Random,
    Weighted,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledUnit {
    /// Index into the operational batch.
    pub index: usize,
    pub phase: Phase,
    pub inclusion_prob: f64,
    pub predicted_label: u8,
    pub true_label: Option<u8>,
    pub correct: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyEstimate {
    pub point: f64,
    pub n_labeled: usize,
    /// Diagnostic spread of the weighted residuals, not a confidence bound.
    pub stderr_proxy: f64,
}

/// `(1 - confidence) + floor`, strictly positive.
pub fn compute_weights(preds: &[Prediction], floor: f64) -> Vec<f64> {
    preds.iter().map(|p| (1.0 - p.confidence).max(0.0) + floor).collect()
}

/// Sequential weighted sampling without replacement of `k` items among
/// `candidates`, via exponential keys: the `k` largest `ln(u) / w` have the
/// same law as `k` successive proportional draws.
fn weighted_without_replacement<R: Rng>(rng: &mut R, candidates: &[usize], weights: &[f64], k: usize) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .map(|&i| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            (u.ln() / weights[i], i)
        })
        .collect();
    keyed.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Solves `sum(1 - exp(-lambda * w)) = target` for `lambda >= 0`.
fn successive_rate(weights: &[f64], target: f64) -> f64 {
    let mass = |lambda: f64| weights.iter().map(|&w| -(-lambda * w).exp_m1()).sum::<f64>();
    if target <= 0.0 {
        return 0.0;
    }
    let mut hi = 1.0;
    while mass(hi) < target && hi < 1e300 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Approximate inclusion probability of every unit of the population.
pub fn inclusion_probabilities(
    weights: &[f64],
    n_random: usize,
    n_weighted: usize,
    approx: InclusionApprox,
) -> Vec<f64> {
    let population = weights.len() as f64;
    let random_prob = n_random as f64 / population;
    match approx {
        InclusionApprox::Linear => {
            let total: f64 = weights.iter().sum();
            weights
                .iter()
                .map(|&w| (random_prob + n_weighted as f64 * w / total).min(1.0))
                .collect()
        }
        InclusionApprox::Successive => {
            // The weighted phase sees a (1 - random_prob) share of the units.
            let lambda = successive_rate(weights, n_weighted as f64 / (1.0 - random_prob));
            weights
                .iter()
                .map(|&w| (random_prob - (1.0 - random_prob) * (-lambda * w).exp_m1()).min(1.0))
                .collect()
        }
    }
}

/// Two-phase draw over the whole batch of predictions. Each unit records its
/// approximate inclusion probability (see [`InclusionApprox`]). A budget at
/// least the population size is a census with `pi = 1`.
pub fn draw_sample(preds: &[Prediction], plan: &SamplingPlan) -> Result<Vec<SampledUnit>> {
    plan.validate()?;
    let population = preds.len();
    if population == 0 {
        return Err(Error::param("cannot sample an empty batch"));
    }
    if plan.budget >= population {
        return Ok(preds
            .iter()
            .enumerate()
            .map(|(index, p)| SampledUnit {
                index,
                phase: Phase::Census,
                inclusion_prob: 1.0,
                predicted_label: p.label,
                true_label: None,
                correct: None,
            })
            .collect());
    }

    let n = plan.budget;
    let n_random = ((n as f64) * plan.random_fraction).round() as usize;
    let n_weighted = n - n_random;
    let weights = compute_weights(preds, plan.weight_floor);
    let pi = inclusion_probabilities(&weights, n_random, n_weighted, plan.inclusion);

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut chosen = vec![false; population];
    let mut units = Vec::with_capacity(n);
    let push = |index: usize, phase: Phase, units: &mut Vec<SampledUnit>| {
        units.push(SampledUnit {
            index,
            phase,
            inclusion_prob: pi[index],
            predicted_label: preds[index].label,
            true_label: None,
            correct: None,
        })
    };
    for index in sample(&mut rng, population, n_random).iter() {
        chosen[index] = true;
        push(index, Phase::Random, &mut units);
    }
    let remainder: Vec<usize> = (0..population).filter(|&i| !chosen[i]).collect();
    for index in weighted_without_replacement(&mut rng, &remainder, &weights, n_weighted) {
        push(index, Phase::Weighted, &mut units);
    }
    Ok(units)
}

/// Fills in true labels from `truth` (indexed like the batch). Labeling an
/// already labeled unit again is a no-op.
pub fn label_units(units: &mut [SampledUnit], truth: &[Option<u8>]) -> Result<()> {
    for unit in units.iter_mut() {
        let label = truth
            .get(unit.index)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Consistency(format!("no ground truth for batch index {}", unit.index)))?;
        unit.true_label = Some(label);
        unit.correct = Some(label == unit.predicted_label);
    }
    Ok(())
}

/// Ratio (Hajek) estimate `sum(c/pi) / sum(1/pi)`.
pub fn estimate_accuracy(units: &[SampledUnit]) -> Result<AccuracyEstimate> {
    if units.is_empty() {
        return Err(Error::param("no sampled units to estimate from"));
    }
    let mut rows = Vec::with_capacity(units.len());
    for u in units {
        let correct = u
            .correct
            .ok_or_else(|| Error::State(format!("unit {} has not been labeled", u.index)))?;
        if !(u.inclusion_prob > 0.0 && u.inclusion_prob <= 1.0) {
            return Err(Error::State(format!(
                "unit {} has inclusion probability {}",
                u.index, u.inclusion_prob
            )));
        }
        rows.push((f64::from(u8::from(correct)), 1.0 / u.inclusion_prob));
    }
    let weight_sum: f64 = rows.iter().map(|r| r.1).sum();
    let point = rows.iter().map(|(c, w)| c * w).sum::<f64>() / weight_sum;

    let n = rows.len() as f64;
    let mean_weight = weight_sum / n;
    let residuals: Vec<f64> = rows.iter().map(|(c, w)| (c - point) * w / mean_weight).collect();
    let stderr_proxy = if rows.len() > 1 {
        let mean = residuals.iter().sum::<f64>() / n;
        let var = residuals.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
        var.sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(AccuracyEstimate {
        point,
        n_labeled: rows.len(),
        stderr_proxy,
    })
}
