//! Data invariants: failure rules mined from the training set with a C4.5
//! style tree over binarized, 2x2 average-pooled pixels.
//!
//! The tree target is whether the classifier got the example wrong. Every
//! root-to-leaf path ending in a fail-majority leaf is a candidate rule;
//! only candidates meeting the confidence and support bounds are kept.

use std::fmt;

use crate::dataset::Example;
use crate::error::{Error, Result};

pub const MIN_CONFIDENCE: f64 = 0.99;
pub const MIN_SUPPORT: usize = 10;

/// Pooled pixels at or above this mean count as ink.
const INK_THRESHOLD: f64 = 0.5;

/// Binarized, 2x2-pooled view of an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryImage {
    pub side: usize,
    pub bits: Vec<bool>,
}

/// Average-pools a square image by 2 in each direction and thresholds at 0.5.
pub fn binarize(pixels: &[f64]) -> Result<BinaryImage> {
    let side = (pixels.len() as f64).sqrt().round() as usize;
    if side * side != pixels.len() || !side.is_multiple_of(2) || side == 0 {
        return Err(Error::param(format!(
            "cannot pool {} pixels: need an even-sided square image",
            pixels.len()
        )));
    }
    let half = side / 2;
    let mut bits = Vec::with_capacity(half * half);
    for r in 0..half {
        for c in 0..half {
            let (r0, c0) = (2 * r, 2 * c);
            let sum = pixels[r0 * side + c0]
                + pixels[r0 * side + c0 + 1]
                + pixels[(r0 + 1) * side + c0]
                + pixels[(r0 + 1) * side + c0 + 1];
            bits.push(sum / 4.0 >= INK_THRESHOLD);
        }
    }
    Ok(BinaryImage { side: half, bits })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Condition {
    pub feature: usize,
    pub value: bool,
}

/// `fail :- c1 & c2 & ...` with its statistics on the extraction set.
#[derive(Clone, Debug, PartialEq)]
pub struct DataRule {
    pub antecedent: Vec<Condition>,
    pub confidence: f64,
    pub support: usize,
    /// Side of the pooled grid the feature indices refer to.
    pub grid_side: usize,
}

impl DataRule {
    pub fn matches(&self, image: &BinaryImage) -> bool {
        self.antecedent
            .iter()
            .all(|c| image.bits.get(c.feature) == Some(&c.value))
    }
}

impl fmt::Display for DataRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("fail :- ")?;
        if self.antecedent.is_empty() {
            f.write_str("true")?;
        }
        for (i, c) in self.antecedent.iter().enumerate() {
            if i > 0 {
                f.write_str(" & ")?;
            }
            let (r, col) = (c.feature / self.grid_side, c.feature % self.grid_side);
            write!(f, "px({r},{col})={}", u8::from(c.value))?;
        }
        write!(f, " [conf={:.4}, supp={}]", self.confidence, self.support)
    }
}

/// Tree growth limits for rule mining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinerConfig {
    pub max_depth: usize,
    pub min_leaf: usize,
    pub min_confidence: f64,
    pub min_support: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            max_depth: 12,
            min_leaf: 10,
            min_confidence: MIN_CONFIDENCE,
            min_support: MIN_SUPPORT,
        }
    }
}

/// Keeps the candidates meeting both bounds.
pub fn filter_rules(candidates: Vec<DataRule>, min_confidence: f64, min_support: usize) -> Vec<DataRule> {
    candidates
        .into_iter()
        .filter(|r| r.confidence >= min_confidence && r.support >= min_support)
        .collect()
}

fn entropy(fail: usize, total: usize) -> f64 {
    if total == 0 || fail == 0 || fail == total {
        return 0.0;
    }
    let p = fail as f64 / total as f64;
    -(p * p.log2() + (1.0 - p) * (1.0 - p).log2())
}

fn split_info(left: usize, total: usize) -> f64 {
    entropy(left, total)
}

struct Miner<'a> {
    images: &'a [BinaryImage],
    fails: &'a [bool],
    cfg: MinerConfig,
    n_features: usize,
    grid_side: usize,
    out: Vec<DataRule>,
}

impl Miner<'_> {
    fn grow(&mut self, rows: &[usize], path: &mut Vec<Condition>) {
        let total = rows.len();
        let n_fail = rows.iter().filter(|&&i| self.fails[i]).count();
        let pure = n_fail == 0 || n_fail == total;
        let split = if pure || path.len() >= self.cfg.max_depth {
            None
        } else {
            self.best_split(rows, n_fail, path)
        };
        match split {
            Some(feature) => {
                let (ones, zeros): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.images[i].bits[feature]);
                for (value, child) in [(false, zeros), (true, ones)] {
                    path.push(Condition { feature, value });
                    self.grow(&child, path);
                    path.pop();
                }
            }
            None => {
                if 2 * n_fail > total {
                    self.out.push(DataRule {
                        antecedent: path.clone(),
                        confidence: n_fail as f64 / total as f64,
                        support: total,
                        grid_side: self.grid_side,
                    });
                }
            }
        }
    }

    /// C4.5 selection: among splits with at least average information gain,
    /// the one with the highest gain ratio.
    fn best_split(&self, rows: &[usize], n_fail: usize, path: &[Condition]) -> Option<usize> {
        let total = rows.len();
        let base = entropy(n_fail, total);
        let mut candidates = Vec::new();
        for feature in 0..self.n_features {
            if path.iter().any(|c| c.feature == feature) {
                continue;
            }
            let (mut ones, mut ones_fail) = (0usize, 0usize);
            for &i in rows {
                if self.images[i].bits[feature] {
                    ones += 1;
                    ones_fail += usize::from(self.fails[i]);
                }
            }
            let zeros = total - ones;
            if ones < self.cfg.min_leaf || zeros < self.cfg.min_leaf {
                continue;
            }
            let zeros_fail = n_fail - ones_fail;
            let cond =
                (ones as f64 * entropy(ones_fail, ones) + zeros as f64 * entropy(zeros_fail, zeros)) / total as f64;
            let gain = base - cond;
            if gain > 1e-12 {
                candidates.push((feature, gain, gain / split_info(ones, total)));
            }
        }
        if candidates.is_empty() {
            return None;
        }
        let mean_gain = candidates.iter().map(|c| c.1).sum::<f64>() / candidates.len() as f64;
        candidates
            .into_iter()
            .filter(|c| c.1 >= mean_gain - 1e-12)
            .fold(None, |best: Option<(usize, f64)>, (f, _, ratio)| match best {
                Some((_, r)) if r >= ratio => best,
                _ => Some((f, ratio)),
            })
            .map(|(f, _)| f)
    }
}

/// All fail-majority leaves of the mined tree, before filtering.
pub fn mine_candidates(images: &[BinaryImage], fails: &[bool], cfg: MinerConfig) -> Result<Vec<DataRule>> {
    if images.len() != fails.len() {
        return Err(Error::Consistency(format!(
            "{} images but {} fail flags",
            images.len(),
            fails.len()
        )));
    }
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    if images.iter().any(|im| im.bits.len() != first.bits.len()) {
        return Err(Error::param("binarized images differ in size"));
    }
    if !fails.iter().any(|&f| f) {
        return Ok(Vec::new());
    }
    let mut miner = Miner {
        images,
        fails,
        cfg,
        n_features: first.bits.len(),
        grid_side: first.side,
        out: Vec::new(),
    };
    let rows: Vec<usize> = (0..images.len()).collect();
    miner.grow(&rows, &mut Vec::new());
    Ok(miner.out)
}

/// Mines failure rules for `examples`, where `fails[i]` tells whether the
/// classifier mispredicted example `i`.
pub fn extract_rules(examples: &[Example], fails: &[bool], cfg: MinerConfig) -> Result<Vec<DataRule>> {
    let images = examples
        .iter()
        .map(|e| binarize(&e.pixels))
        .collect::<Result<Vec<_>>>()?;
    let candidates = mine_candidates(&images, fails, cfg)?;
    Ok(filter_rules(candidates, cfg.min_confidence, cfg.min_support))
}

/// Recomputes `(confidence, support)` of a rule by scanning the extraction set.
pub fn rescore(rule: &DataRule, images: &[BinaryImage], fails: &[bool]) -> (f64, usize) {
    let (mut support, mut fail) = (0usize, 0usize);
    for (im, &f) in images.iter().zip(fails) {
        if rule.matches(im) {
            support += 1;
            fail += usize::from(f);
        }
    }
    let confidence = if support == 0 {
        0.0
    } else {
        fail as f64 / support as f64
    };
    (confidence, support)
}
