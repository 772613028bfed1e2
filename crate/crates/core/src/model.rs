//! A one-hidden-layer perceptron (input -> 128 ReLU -> 10 softmax) trained by
//! momentum SGD on cross-entropy. This is the classifier under assessment.

use std::io::{self, Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Example, LabeledSet, N_CLASSES};
use crate::error::{Error, Result};

pub const HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Derived from the master seed in experiments; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("train.epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("train.batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("train.learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("train.momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Weights of the network. Immutable once trained.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    /// hidden x input
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// classes x hidden
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub init_seed: u64,
}

/// Output of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub label: u8,
    pub confidence: f64,
    /// Softmax outputs.
    pub last_layer: [f64; N_CLASSES],
}

impl Prediction {
    fn from_probs(probs: &[f64]) -> Self {
        let mut last_layer = [0.0; N_CLASSES];
        last_layer.copy_from_slice(probs);
        let (label, confidence) = last_layer.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |best, (i, p)| if p > best.1 { (i, p) } else { best },
        );
        Prediction {
            label: label as u8,
            confidence,
            last_layer,
        }
    }
}

/// Parameter gradients, laid out like [`NetworkParams`].
#[derive(Clone, Debug)]
pub struct Gradients {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl NetworkParams {
    /// Uniform init in `[-sqrt(6/fan_in), sqrt(6/fan_in)]`, zero biases.
    pub fn init(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |rows: usize, cols: usize| {
            let limit = (6.0 / cols as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-limit..limit))
        };
        let w1 = layer(HIDDEN, input_dim);
        let w2 = layer(N_CLASSES, HIDDEN);
        NetworkParams {
            w1,
            b1: Array1::zeros(HIDDEN),
            w2,
            b2: Array1::zeros(N_CLASSES),
            init_seed: seed,
        }
    }

    /// All-zero weights; every input maps to the uniform distribution.
    pub fn zeros(input_dim: usize) -> Self {
        NetworkParams {
            w1: Array2::zeros((HIDDEN, input_dim)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((N_CLASSES, HIDDEN)),
            b2: Array1::zeros(N_CLASSES),
            init_seed: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.w1
            .iter()
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .chain(self.b2.iter())
            .copied()
    }

    /// Content hash; artifacts built for a model record it to detect staleness.
    pub fn fingerprint(&self) -> u64 {
        let mut hasher = Sha256::new();
        hasher.update((self.input_dim() as u64).to_le_bytes());
        for v in self.values() {
            hasher.update(v.to_bits().to_le_bytes());
        }
        let digest = hasher.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 is 32 bytes"))
    }

    fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut hidden = x.dot(&self.w1.t()) + &self.b1;
        hidden.mapv_inplace(|v| v.max(0.0));
        let mut probs = hidden.dot(&self.w2.t()) + &self.b2;
        for mut row in probs.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        (hidden, probs)
    }

    /// Mean cross-entropy and its gradient over a batch.
    pub fn loss_and_gradient(&self, x: ArrayView2<f64>, labels: &[u8]) -> (f64, Gradients) {
        let n = x.nrows() as f64;
        let (hidden, probs) = self.forward(x);
        let mut loss = 0.0;
        let mut delta = probs;
        for (mut row, &label) in delta.rows_mut().into_iter().zip(labels) {
            loss -= row[label as usize].max(f64::MIN_POSITIVE).ln();
            row[label as usize] -= 1.0;
        }
        delta /= n;
        let gw2 = delta.t().dot(&hidden);
        let gb2 = delta.sum_axis(Axis(0));
        let mut dhidden = delta.dot(&self.w2);
        ndarray::Zip::from(&mut dhidden).and(&hidden).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0
            }
        });
        let gw1 = dhidden.t().dot(&x);
        let gb1 = dhidden.sum_axis(Axis(0));
        (
            loss / n,
            Gradients {
                w1: gw1,
                b1: gb1,
                w2: gw2,
                b2: gb2,
            },
        )
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, x: ArrayView2<f64>, labels: &[u8]) -> f64 {
        let (_, probs) = self.forward(x);
        let total: f64 = probs
            .rows()
            .into_iter()
            .zip(labels)
            .map(|(row, &l)| -row[l as usize].max(f64::MIN_POSITIVE).ln())
            .sum();
        total / x.nrows() as f64
    }

    /// Little-endian dump: `[input, hidden, classes, init_seed]` as u64, then
    /// w1, b1, w2, b2 as f64 in row-major order.
    pub fn save<W: Write>(&self, mut out: W) -> io::Result<()> {
        for h in [self.input_dim() as u64, HIDDEN as u64, N_CLASSES as u64, self.init_seed] {
            out.write_all(&h.to_le_bytes())?;
        }
        for v in self.values() {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut input: R) -> Result<Self> {
        let mut word = [0u8; 8];
        let mut header = [0u64; 4];
        for h in &mut header {
            input.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let [input_dim, hidden, classes, init_seed] = header;
        if hidden as usize != HIDDEN || classes as usize != N_CLASSES {
            return Err(Error::Format(format!(
                "architecture {input_dim}x{hidden}x{classes} does not match x{HIDDEN}x{N_CLASSES}"
            )));
        }
        let mut params = NetworkParams::zeros(input_dim as usize);
        params.init_seed = init_seed;
        for v in params
            .w1
            .iter_mut()
            .chain(params.b1.iter_mut())
            .chain(params.w2.iter_mut())
            .chain(params.b2.iter_mut())
        {
            input.read_exact(&mut word)?;
            *v = f64::from_le_bytes(word);
        }
        Ok(params)
    }
}

fn stack(examples: &[&Example], dim: usize) -> Array2<f64> {
    let mut x = Array2::zeros((examples.len(), dim));
    for (mut row, e) in x.rows_mut().into_iter().zip(examples) {
        row.assign(&ndarray::aview1(&e.pixels));
    }
    x
}

/// Mini-batch momentum SGD. Continues from `init` when given, otherwise
/// starts from a fresh seeded initialization.
pub fn train(data: &LabeledSet, cfg: &TrainConfig, init: Option<&NetworkParams>) -> Result<NetworkParams> {
    train_with_history(data, cfg, init).map(|(params, _)| params)
}

/// Like [`train`], also returning the mean mini-batch loss of every epoch.
pub fn train_with_history(
    data: &LabeledSet,
    cfg: &TrainConfig,
    init: Option<&NetworkParams>,
) -> Result<(NetworkParams, Vec<f64>)> {
    cfg.validate()?;
    let dim = data
        .input_dim()
        .ok_or_else(|| Error::param("cannot train on an empty set"))?;
    if data.examples.iter().any(|e| e.pixels.len() != dim) {
        return Err(Error::param("examples differ in input dimension"));
    }
    let labels = data.examples.iter().map(Example::label).collect::<Result<Vec<_>>>()?;
    let mut params = match init {
        Some(p) if p.input_dim() != dim => {
            return Err(Error::param(format!(
                "initial network expects {} inputs, data has {dim}",
                p.input_dim()
            )))
        }
        Some(p) => p.clone(),
        None => NetworkParams::init(dim, cfg.seed),
    };

    let mut velocity = Gradients {
        w1: Array2::zeros(params.w1.raw_dim()),
        b1: Array1::zeros(params.b1.raw_dim()),
        w2: Array2::zeros(params.w2.raw_dim()),
        b2: Array1::zeros(params.b2.raw_dim()),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data.examples[i]).collect();
            let batch_labels: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let x = stack(&batch, dim);
            let (loss, grad) = params.loss_and_gradient(x.view(), &batch_labels);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            let (lr, mu) = (cfg.learning_rate, cfg.momentum);
            velocity.w1.zip_mut_with(&grad.w1, |v, &g| *v = mu * *v - lr * g);
            velocity.b1.zip_mut_with(&grad.b1, |v, &g| *v = mu * *v - lr * g);
            velocity.w2.zip_mut_with(&grad.w2, |v, &g| *v = mu * *v - lr * g);
            velocity.b2.zip_mut_with(&grad.b2, |v, &g| *v = mu * *v - lr * g);
            params.w1 += &velocity.w1;
            params.b1 += &velocity.b1;
            params.w2 += &velocity.w2;
            params.b2 += &velocity.b2;
        }
        if !epoch_loss.is_finite() || !params.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        history.push(epoch_loss / data.len() as f64);
    }
    Ok((params, history))
}

pub fn predict(params: &NetworkParams, x: &Example) -> Result<Prediction> {
    Ok(predict_batch(params, std::slice::from_ref(x))?.remove(0))
}

pub fn predict_batch(params: &NetworkParams, xs: &[Example]) -> Result<Vec<Prediction>> {
    let dim = params.input_dim();
    if let Some(e) = xs.iter().find(|e| e.pixels.len() != dim) {
        return Err(Error::param(format!(
            "example {} has {} pixels, network expects {dim}",
            e.id,
            e.pixels.len()
        )));
    }
    let refs: Vec<&Example> = xs.iter().collect();
    let (_, probs) = params.forward(stack(&refs, dim).view());
    Ok(probs
        .rows()
        .into_iter()
        .map(|row| Prediction::from_probs(row.as_slice().expect("standard layout")))
        .collect())
}

/// Fraction of examples whose predicted label equals the true label.
pub fn accuracy(params: &NetworkParams, data: &[Example]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::param("accuracy of an empty set"));
    }
    let preds = predict_batch(params, data)?;
    let mut correct = 0usize;
    for (p, e) in preds.iter().zip(data) {
        if p.label == e.label()? {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}
