//! Invariant-based pseudo-oracle judging each operational prediction Pass or
//! Fail without ground truth.
//!
//! Three invariant families contribute:
//! - domain: the predicted class must be one the input's source form accepts;
//! - data: mined pixel rules that coincide with classifier failures;
//! - model: a random forest over softmax outputs predicting failure.
//!
//! A prediction fails when any active family fires. The baseline mode drops
//! the domain family and relies on training data and the model alone.

pub mod forest;
pub mod rules;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Example, FormId, FormSpec};
use crate::error::{Error, Result};
use crate::model::{predict_batch, NetworkParams, Prediction};

pub use forest::{FailureForest, Features, ForestConfig};
pub use rules::{binarize, BinaryImage, Condition, DataRule, MinerConfig};

/// Expert constraint: each form only accepts some classes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainInvariant {
    pub forms: FormSpec,
}

impl DomainInvariant {
    pub fn new(forms: FormSpec) -> Self {
        DomainInvariant { forms }
    }

    /// True when the prediction is impossible for the form.
    pub fn violated(&self, form: FormId, predicted: u8) -> bool {
        !self.forms.allows(form, predicted)
    }
}

pub fn check_domain(inv: &DomainInvariant, form: FormId, predicted: u8) -> bool {
    inv.violated(form, predicted)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Domain,
    Data,
    Model,
}

/// Which invariant families fired (or, for [`OracleMode`], are active).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Families {
    pub domain: bool,
    pub data: bool,
    pub model: bool,
}

impl Families {
    pub const ALL: Families = Families {
        domain: true,
        data: true,
        model: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.domain || self.data || self.model)
    }

    pub fn contains(&self, family: Family) -> bool {
        match family {
            Family::Domain => self.domain,
            Family::Data => self.data,
            Family::Model => self.model,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Family> + '_ {
        [Family::Domain, Family::Data, Family::Model]
            .into_iter()
            .filter(|f| self.contains(*f))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Verdict {
    pub outcome: Outcome,
    pub fired: Families,
}

impl Verdict {
    fn from_fired(fired: Families) -> Self {
        let outcome = if fired.is_empty() { Outcome::Pass } else { Outcome::Fail };
        Verdict { outcome, fired }
    }

    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Pass
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Domain, data and model invariants.
    #[default]
    DnnOs,
    /// Data and model invariants only.
    Baseline,
}

impl OracleMode {
    pub fn families(self) -> Families {
        match self {
            OracleMode::DnnOs => Families::ALL,
            OracleMode::Baseline => Families {
                domain: false,
                data: true,
                model: true,
            },
        }
    }
}

impl fmt::Display for OracleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleMode::DnnOs => "dnn_os",
            OracleMode::Baseline => "baseline",
        })
    }
}

impl FromStr for OracleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dnn_os" => Ok(OracleMode::DnnOs),
            "baseline" => Ok(OracleMode::Baseline),
            other => Err(Error::Config(format!(
                "unknown oracle mode `{other}` (expected dnn_os or baseline)"
            ))),
        }
    }
}

/// Data rules mined from the training set for one model snapshot.
pub fn extract_data_rules(train: &[Example], params: &NetworkParams, cfg: MinerConfig) -> Result<Vec<DataRule>> {
    let fails = failure_flags(train, &predict_batch(params, train)?)?;
    rules::extract_rules(train, &fails, cfg)
}

/// Failure forest fitted on the verification set for one model snapshot.
pub fn train_failure_forest(
    verification: &[Example],
    params: &NetworkParams,
    cfg: ForestConfig,
    seed: u64,
) -> Result<FailureForest> {
    if verification.is_empty() {
        return Err(Error::param("failure forest needs a nonempty verification set"));
    }
    let preds = predict_batch(params, verification)?;
    let fails = failure_flags(verification, &preds)?;
    let xs: Vec<Features> = preds.iter().map(|p| p.last_layer).collect();
    FailureForest::fit(&xs, &fails, cfg, seed)
}

/// `true` where the prediction disagrees with the example's label.
pub fn failure_flags(examples: &[Example], preds: &[Prediction]) -> Result<Vec<bool>> {
    examples
        .iter()
        .zip(preds)
        .map(|(e, p)| Ok(p.label != e.label()?))
        .collect()
}

/// All invariant artifacts, tied to the model snapshot they were built for.
#[derive(Clone, Debug)]
pub struct Invariants {
    pub domain: DomainInvariant,
    pub rules: Vec<DataRule>,
    pub forest: FailureForest,
    model_fingerprint: u64,
}

impl Invariants {
    pub fn build(
        domain: DomainInvariant,
        train: &[Example],
        verification: &[Example],
        params: &NetworkParams,
        miner: MinerConfig,
        forest: ForestConfig,
        seed: u64,
    ) -> Result<Self> {
        Ok(Invariants {
            domain,
            rules: extract_data_rules(train, params, miner)?,
            forest: train_failure_forest(verification, params, forest, seed)?,
            model_fingerprint: params.fingerprint(),
        })
    }

    /// Assembles artifacts built elsewhere for the model with `fingerprint`.
    pub fn from_parts(domain: DomainInvariant, rules: Vec<DataRule>, forest: FailureForest, fingerprint: u64) -> Self {
        Invariants {
            domain,
            rules,
            forest,
            model_fingerprint: fingerprint,
        }
    }

    pub fn model_fingerprint(&self) -> u64 {
        self.model_fingerprint
    }

    /// Rules rendered one per line.
    pub fn rules_text(&self) -> String {
        self.rules.iter().map(|r| format!("{r}\n")).collect()
    }

    /// Judges a prediction with a chosen set of active families.
    pub fn judge_with(
        &self,
        active: Families,
        model_fingerprint: u64,
        x: &Example,
        pred: &Prediction,
    ) -> Result<Verdict> {
        if model_fingerprint != self.model_fingerprint {
            return Err(Error::Consistency(format!(
                "invariants were built for model {:016x}, judging model {model_fingerprint:016x}",
                self.model_fingerprint
            )));
        }
        let data = active.data && !self.rules.is_empty() && {
            let image = binarize(&x.pixels)?;
            self.rules.iter().any(|r| r.matches(&image))
        };
        let fired = Families {
            domain: active.domain && self.domain.violated(x.form, pred.label),
            data,
            model: active.model && self.forest.predicts_fail(&pred.last_layer),
        };
        Ok(Verdict::from_fired(fired))
    }

    pub fn judge(&self, mode: OracleMode, model_fingerprint: u64, x: &Example, pred: &Prediction) -> Result<Verdict> {
        self.judge_with(mode.families(), model_fingerprint, x, pred)
    }

    pub fn judge_batch(
        &self,
        mode: OracleMode,
        params: &NetworkParams,
        xs: &[Example],
        preds: &[Prediction],
    ) -> Result<Vec<Verdict>> {
        if xs.len() != preds.len() {
            return Err(Error::Consistency(format!(
                "{} inputs but {} predictions",
                xs.len(),
                preds.len()
            )));
        }
        let fingerprint = params.fingerprint();
        xs.iter()
            .zip(preds)
            .map(|(x, p)| self.judge(mode, fingerprint, x, p))
            .collect()
    }
}

/// Fraction of Pass verdicts.
pub fn predicted_accuracy(verdicts: &[Verdict]) -> Result<f64> {
    if verdicts.is_empty() {
        return Err(Error::param("predicted accuracy of no verdicts"));
    }
    let passed = verdicts.iter().filter(|v| v.passed()).count();
    Ok(passed as f64 / verdicts.len() as f64)
}
