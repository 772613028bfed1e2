//! Model invariants: a random forest over the classifier's softmax outputs
//! predicting whether a prediction is a failure.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::N_CLASSES;
use crate::error::{Error, Result};

pub type Features = [f64; N_CLASSES];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 10,
            min_samples_split: 2,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_samples_split < 2 {
            return Err(Error::param(
                "forest needs n_trees >= 1, max_depth >= 1, min_samples_split >= 2",
            ));
        }
        Ok(())
    }

    /// Features tried per split: ceil(sqrt(d)).
    pub fn features_per_split(&self) -> usize {
        (N_CLASSES as f64).sqrt().ceil() as usize
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Leaf {
        fail: bool,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &Features) -> bool {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { fail } => return fail,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

fn gini(fail: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let p = fail as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    xs: &'a [Features],
    ys: &'a [bool],
    cfg: ForestConfig,
    rng: ChaCha8Rng,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn leaf(&mut self, rows: &[usize]) -> usize {
        let fails = rows.iter().filter(|&&i| self.ys[i]).count();
        self.nodes.push(Node::Leaf {
            fail: 2 * fails > rows.len(),
        });
        self.nodes.len() - 1
    }

    fn grow(&mut self, rows: &mut [usize], depth: usize) -> usize {
        let fails = rows.iter().filter(|&&i| self.ys[i]).count();
        if depth >= self.cfg.max_depth || rows.len() < self.cfg.min_samples_split || fails == 0 || fails == rows.len() {
            return self.leaf(rows);
        }
        let Some((feature, threshold)) = self.best_split(rows, fails) else {
            return self.leaf(rows);
        };
        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { fail: false });
        rows.sort_unstable_by(|&a, &b| self.xs[a][feature].total_cmp(&self.xs[b][feature]).then(a.cmp(&b)));
        let cut = rows.partition_point(|&i| self.xs[i][feature] <= threshold);
        let (l, r) = rows.split_at_mut(cut);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[slot] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        slot
    }

    fn best_split(&mut self, rows: &[usize], fails: usize) -> Option<(usize, f64)> {
        let n = rows.len();
        let parent = gini(fails, n);
        let tried = sample(&mut self.rng, N_CLASSES, self.cfg.features_per_split());
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted = rows.to_vec();
        for feature in tried.iter() {
            sorted.sort_unstable_by(|&a, &b| self.xs[a][feature].total_cmp(&self.xs[b][feature]));
            let mut left_fail = 0usize;
            for k in 0..n - 1 {
                left_fail += usize::from(self.ys[sorted[k]]);
                let (lo, hi) = (self.xs[sorted[k]][feature], self.xs[sorted[k + 1]][feature]);
                if lo == hi {
                    continue;
                }
                let left_n = k + 1;
                let right_n = n - left_n;
                let impurity = (left_n as f64 * gini(left_fail, left_n)
                    + right_n as f64 * gini(fails - left_fail, right_n))
                    / n as f64;
                let decrease = parent - impurity;
                if decrease > 1e-12 && best.is_none_or(|b| decrease > b.2) {
                    best = Some((feature, 0.5 * (lo + hi), decrease));
                }
            }
        }
        best.map(|(f, t, _)| (f, t))
    }
}

/// Bagged CART ensemble voting pass/fail. Empty when trained on a single
/// class, in which case it always votes pass.
#[derive(Clone, Debug, PartialEq)]
pub struct FailureForest {
    trees: Vec<Tree>,
    degenerate: bool,
    pub config: ForestConfig,
    pub seed: u64,
}

impl FailureForest {
    pub fn fit(xs: &[Features], ys: &[bool], cfg: ForestConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if xs.len() != ys.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} targets",
                xs.len(),
                ys.len()
            )));
        }
        if xs.is_empty() {
            return Err(Error::param("cannot fit a forest on no data"));
        }
        let n_fail = ys.iter().filter(|&&y| y).count();
        if n_fail == 0 || n_fail == ys.len() {
            // Single-class target: only the majority class can be learned.
            let trees = if n_fail == 0 {
                Vec::new()
            } else {
                vec![Tree {
                    nodes: vec![Node::Leaf { fail: true }],
                }]
            };
            return Ok(FailureForest {
                trees,
                degenerate: true,
                config: cfg,
                seed,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trees = (0..cfg.n_trees)
            .map(|_| {
                let mut rows: Vec<usize> = (0..xs.len()).map(|_| rng.gen_range(0..xs.len())).collect();
                let mut builder = Builder {
                    xs,
                    ys,
                    cfg,
                    rng: ChaCha8Rng::seed_from_u64(rng.gen()),
                    nodes: Vec::new(),
                };
                builder.grow(&mut rows, 0);
                Tree { nodes: builder.nodes }
            })
            .collect();
        Ok(FailureForest {
            trees,
            degenerate: false,
            config: cfg,
            seed,
        })
    }

    /// Fraction of trees voting fail.
    pub fn fail_vote(&self, x: &Features) -> f64 {
        if self.trees.is_empty() {
            return 0.0;
        }
        let fails = self.trees.iter().filter(|t| t.predict(x)).count();
        fails as f64 / self.trees.len() as f64
    }

    /// Strict majority of trees vote fail.
    pub fn predicts_fail(&self, x: &Features) -> bool {
        self.fail_vote(x) > 0.5
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }
}
