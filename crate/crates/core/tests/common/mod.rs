#![allow(dead_code)]

use std::path::PathBuf;

use daic::dataset::{self, LabeledSet, N_CLASSES};
use daic::model::Prediction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

pub fn mnist() -> LabeledSet {
    let dir = data_dir();
    dataset::load_idx(&dir.join("images-idx3-ubyte"), &dir.join("labels-idx1-ubyte"))
        .expect("MNIST IDX files under data/")
}

pub fn prediction(label: u8, confidence: f64) -> Prediction {
    let mut last_layer = [(1.0 - confidence) / (N_CLASSES - 1) as f64; N_CLASSES];
    last_layer[label as usize] = confidence;
    Prediction {
        label,
        confidence,
        last_layer,
    }
}

/// Synthetic operational batch: `n` units, exactly `round(n * accuracy)`
/// correct. Correct units have confidence in [0.6, 1.0], failing ones in
/// [0.2, 0.8], so low confidence signals failure. Returns predictions and
/// the true labels.
pub fn correlated_population(n: usize, accuracy: f64, seed: u64) -> (Vec<Prediction>, Vec<Option<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_correct = (n as f64 * accuracy).round() as usize;
    let mut preds = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    for i in 0..n {
        let label = rng.gen_range(0..N_CLASSES as u8);
        if i < n_correct {
            preds.push(prediction(label, rng.gen_range(0.6..1.0)));
            truth.push(Some(label));
        } else {
            preds.push(prediction(label, rng.gen_range(0.2..0.8)));
            truth.push(Some((label + 1) % N_CLASSES as u8));
        }
    }
    (preds, truth)
}

/// Default-sized train / verification / operational splits of the bundled
/// MNIST digits and a model trained with the default config.
pub fn trained_mnist(seed: u64) -> (dataset::Splits, daic::model::NetworkParams) {
    let splits = dataset::make_splits(&mnist(), dataset::SplitSizes::for_cycles(8, 1000), seed).unwrap();
    let cfg = daic::model::TrainConfig {
        seed,
        ..Default::default()
    };
    let params = daic::model::train(&splits.train, &cfg, None).unwrap();
    (splits, params)
}

/// Row-stacks example pixels into a design matrix.
pub fn design_matrix(examples: &[dataset::Example]) -> ndarray::Array2<f64> {
    let dim = examples[0].pixels.len();
    let flat: Vec<f64> = examples.iter().flat_map(|e| e.pixels.iter().copied()).collect();
    ndarray::Array2::from_shape_vec((examples.len(), dim), flat).unwrap()
}
