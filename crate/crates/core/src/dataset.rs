//! Example sets: MNIST IDX ingestion, train/verification/operational splits,
//! the operational stream with simulated label shift, and a small synthetic
//! fixture for fast tests.
//!
//! Every example carries the form it was entered through. The form is a
//! function of the example's (possibly shifted) true label, modeling a user
//! who writes the intended digit into the matching form.

use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CLASSES: usize = 10;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Side length of the synthetic fixture images (8x8 = 64 pixels).
pub const SYNTH_SIDE: usize = 8;

/// Input source of an example.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FormId {
    A,
    B,
    C,
}

impl FormId {
    pub const ALL: [FormId; 3] = [FormId::A, FormId::B, FormId::C];

    fn index(self) -> usize {
        match self {
            FormId::A => 0,
            FormId::B => 1,
            FormId::C => 2,
        }
    }
}

impl fmt::Display for FormId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FormId::A => "A",
            FormId::B => "B",
            FormId::C => "C",
        };
        f.write_str(s)
    }
}

/// Which class ids each form accepts. The three sets partition `0..10`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FormSpec {
    allowed: [Vec<u8>; 3],
}

impl Default for FormSpec {
    /// Curved digits on form A, straight-stroke digits on form B, the rest on C.
    fn default() -> Self {
        FormSpec {
            allowed: [vec![0, 3, 6, 8, 9], vec![1, 4, 7], vec![2, 5]],
        }
    }
}

impl FormSpec {
    pub fn new(a: Vec<u8>, b: Vec<u8>, c: Vec<u8>) -> Result<Self> {
        let mut seen = [false; N_CLASSES];
        for &label in a.iter().chain(&b).chain(&c) {
            let slot = seen
                .get_mut(label as usize)
                .ok_or_else(|| Error::param(format!("class id {label} out of range")))?;
            if *slot {
                return Err(Error::param(format!("class id {label} assigned to two forms")));
            }
            *slot = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::param(format!("class id {missing} assigned to no form")));
        }
        Ok(FormSpec { allowed: [a, b, c] })
    }

    pub fn allowed(&self, form: FormId) -> &[u8] {
        &self.allowed[form.index()]
    }

    pub fn allows(&self, form: FormId, label: u8) -> bool {
        self.allowed(form).contains(&label)
    }

    pub fn form_of(&self, label: u8) -> FormId {
        FormId::ALL
            .into_iter()
            .find(|&f| self.allows(f, label))
            .expect("form sets partition the label space")
    }
}

/// Label swaps applied to operational data from `start_cycle` on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub swap_pairs: Vec<(u8, u8)>,
    pub start_cycle: usize,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            swap_pairs: vec![(2, 7)],
            start_cycle: 4,
        }
    }
}

impl ShiftSpec {
    pub fn none() -> Self {
        ShiftSpec {
            swap_pairs: Vec::new(),
            start_cycle: usize::MAX,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = [false; N_CLASSES];
        for &(a, b) in &self.swap_pairs {
            if a == b {
                return Err(Error::param(format!("swap pair ({a},{b}) is degenerate")));
            }
            for label in [a, b] {
                let slot = seen
                    .get_mut(label as usize)
                    .ok_or_else(|| Error::param(format!("class id {label} out of range")))?;
                if *slot {
                    return Err(Error::param(format!("class id {label} appears in two swap pairs")));
                }
                *slot = true;
            }
        }
        Ok(())
    }

    pub fn active(&self, cycle: usize) -> bool {
        cycle >= self.start_cycle
    }

    /// Partner of `label` under the swap, or `label` itself.
    pub fn apply(&self, label: u8) -> u8 {
        for &(a, b) in &self.swap_pairs {
            if label == a {
                return b;
            }
            if label == b {
                return a;
            }
        }
        label
    }
}

/// One input image with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    /// Position in the originally loaded collection; stable across splits.
    pub id: usize,
    pub pixels: Arc<[f64]>,
    pub true_label: Option<u8>,
    pub form: FormId,
    pub origin_cycle: usize,
}

impl Example {
    pub fn label(&self) -> Result<u8> {
        self.true_label
            .ok_or_else(|| Error::State(format!("example {} carries no label", self.id)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Train,
    Verification,
    Pool,
}

/// Ordered collection of labeled examples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub examples: Vec<Example>,
    pub role: Role,
}

impl LabeledSet {
    pub fn new(examples: Vec<Example>, role: Role) -> Result<Self> {
        if let Some(e) = examples.iter().find(|e| e.true_label.is_none()) {
            return Err(Error::State(format!("example {} in a labeled set has no label", e.id)));
        }
        Ok(LabeledSet { examples, role })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.examples.first().map(|e| e.pixels.len())
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples
            .iter()
            .map(|e| e.true_label.expect("labeled set"))
            .collect()
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

fn read_u32(buf: &mut &[u8]) -> io::Result<u32> {
    let mut word = [0u8; 4];
    buf.read_exact(&mut word)?;
    Ok(u32::from_be_bytes(word))
}

fn truncated(what: &str) -> Error {
    Error::Io(io::Error::new(
        io::ErrorKind::UnexpectedEof,
        format!("{what} file is truncated"),
    ))
}

/// Parses an IDX image/label pair already in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<LabeledSet> {
    let mut img = images;
    let magic = read_u32(&mut img).map_err(|_| truncated("image"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32(&mut img).map_err(|_| truncated("image"))? as usize;
    let rows = read_u32(&mut img).map_err(|_| truncated("image"))? as usize;
    let cols = read_u32(&mut img).map_err(|_| truncated("image"))? as usize;

    let mut lab = labels;
    let magic = read_u32(&mut lab).map_err(|_| truncated("label"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = read_u32(&mut lab).map_err(|_| truncated("label"))? as usize;
    if label_count != count {
        return Err(Error::Consistency(format!(
            "image file holds {count} records, label file {label_count}"
        )));
    }

    let dim = rows * cols;
    if img.len() < count * dim {
        return Err(truncated("image"));
    }
    if lab.len() < count {
        return Err(truncated("label"));
    }

    let forms = FormSpec::default();
    let examples = img
        .chunks_exact(dim.max(1))
        .zip(lab)
        .take(count)
        .enumerate()
        .map(|(id, (raw, &label))| {
            if label as usize >= N_CLASSES {
                return Err(Error::Format(format!("record {id} has label {label}")));
            }
            Ok(Example {
                id,
                pixels: raw.iter().map(|&b| f64::from(b) / 255.0).collect(),
                true_label: Some(label),
                form: forms.form_of(label),
                origin_cycle: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    LabeledSet::new(examples, Role::Pool)
}

/// Loads an MNIST-style IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledSet> {
    let images = fs::read(images_path)?;
    let labels = fs::read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Encodes a labeled set back to IDX bytes (images, labels). Pixels are
/// rounded to the nearest byte; the image must be square.
pub fn encode_idx(set: &LabeledSet) -> Result<(Vec<u8>, Vec<u8>)> {
    let dim = set.input_dim().unwrap_or(0);
    let side = (dim as f64).sqrt().round() as usize;
    if side * side != dim {
        return Err(Error::param(format!("input dimension {dim} is not a square image")));
    }
    let count = set.len() as u32;
    let mut images = Vec::with_capacity(16 + set.len() * dim);
    images.extend(IDX_IMAGES_MAGIC.to_be_bytes());
    images.extend(count.to_be_bytes());
    images.extend((side as u32).to_be_bytes());
    images.extend((side as u32).to_be_bytes());
    let mut labels = Vec::with_capacity(8 + set.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend(count.to_be_bytes());
    for e in &set.examples {
        images.extend(e.pixels.iter().map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8));
        labels.push(e.label()?);
    }
    Ok((images, labels))
}

/// Sizes of the three disjoint splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub verification: usize,
    /// Minimum number of examples the operational pool must hold.
    pub operational: usize,
}

impl SplitSizes {
    /// 1000 train / 500 verification / `cycles` batches of `batch_size`.
    pub fn for_cycles(cycles: usize, batch_size: usize) -> Self {
        SplitSizes {
            train: 1000,
            verification: 500,
            operational: cycles * batch_size,
        }
    }
}

/// The three disjoint roles carved out of a loaded pool.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledSet,
    pub verification: LabeledSet,
    pub operational_pool: LabeledSet,
}

/// Uniform random, disjoint split; the operational pool receives every
/// example not assigned to train or verification.
pub fn make_splits(pool: &LabeledSet, sizes: SplitSizes, seed: u64) -> Result<Splits> {
    let needed = sizes.train + sizes.verification + sizes.operational;
    if pool.len() < needed {
        return Err(Error::Capacity {
            needed,
            available: pool.len(),
        });
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let take = |range: std::ops::Range<usize>, role| LabeledSet {
        examples: order[range].iter().map(|&i| pool.examples[i].clone()).collect(),
        role,
    };
    let verif_end = sizes.train + sizes.verification;
    Ok(Splits {
        train: take(0..sizes.train, Role::Train),
        verification: take(sizes.train..verif_end, Role::Verification),
        operational_pool: take(verif_end..pool.len(), Role::Pool),
    })
}

/// Takes the `cycle`-th (1-based) slice of `batch_size` examples from the
/// operational pool, so consecutive cycles never see the same input. From
/// `shift.start_cycle` on, swapped classes get the partner label and the
/// matching form; pixels are untouched. `seed` only permutes the batch order.
pub fn draw_operational_batch(
    pool: &LabeledSet,
    cycle: usize,
    batch_size: usize,
    shift: &ShiftSpec,
    forms: &FormSpec,
    seed: u64,
) -> Result<Vec<Example>> {
    if cycle == 0 {
        return Err(Error::param("cycles are numbered from 1"));
    }
    let start = (cycle - 1) * batch_size;
    let end = start + batch_size;
    if end > pool.len() {
        return Err(Error::Capacity {
            needed: end,
            available: pool.len(),
        });
    }
    let shifted = shift.active(cycle);
    let mut batch: Vec<Example> = pool.examples[start..end]
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.origin_cycle = cycle;
            if shifted {
                let label = shift.apply(e.label()?);
                e.true_label = Some(label);
                e.form = forms.form_of(label);
            }
            Ok(e)
        })
        .collect::<Result<_>>()?;
    batch.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(batch)
}

/// Fixed per-class prototypes for the synthetic fixture.
pub fn synth_prototypes(n_classes: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x005e_ed0f_da1c);
    (0..n_classes)
        .map(|_| (0..SYNTH_SIDE * SYNTH_SIDE).map(|_| rng.gen::<f64>()).collect())
        .collect()
}

/// Balanced synthetic set: class prototype plus uniform noise in
/// `[-noise, noise]`, clamped to `[0, 1]`.
pub fn synth_generate(n: usize, n_classes: usize, noise: f64, seed: u64) -> Result<LabeledSet> {
    if n_classes == 0 || n_classes > N_CLASSES {
        return Err(Error::param(format!("n_classes must be in 1..=10, got {n_classes}")));
    }
    if n < n_classes {
        return Err(Error::param(format!(
            "need at least one example per class: n={n} < n_classes={n_classes}"
        )));
    }
    if !(0.0..=0.5).contains(&noise) {
        return Err(Error::param(format!("noise must lie in [0, 0.5], got {noise}")));
    }
    let prototypes = synth_prototypes(n_classes);
    let forms = FormSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut labels: Vec<u8> = (0..n).map(|i| (i % n_classes) as u8).collect();
    labels.shuffle(&mut rng);
    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| {
            let pixels = prototypes[label as usize]
                .iter()
                .map(|&p| {
                    if noise == 0.0 {
                        p
                    } else {
                        (p + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0)
                    }
                })
                .collect();
            Example {
                id,
                pixels,
                true_label: Some(label),
                form: forms.form_of(label),
                origin_cycle: 0,
            }
        })
        .collect();
    LabeledSet::new(examples, Role::Pool)
}

impl FromStr for FormId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(FormId::A),
            "B" | "b" => Ok(FormId::B),
            "C" | "c" => Ok(FormId::C),
            other => Err(Error::param(format!("unknown form `{other}`"))),
        }
    }
}
