//! Dataset ingestion, augmentation and multi-resolution batch preparation.
//!
//! Images are held in memory as `u8` RGB planes and converted to normalized
//! `f32` tensors on demand. Supported on-disk layouts:
//!
//! * `cifar10`: `data_batch_{1..5}.bin` and `test_batch.bin` (the binary
//!   release), either directly under the root or in `cifar-10-batches-bin/`.
//! * `cifar100`: `train.bin` and `test.bin`, directly under the root or in
//!   `cifar-100-binary/`. Fine labels are used.
//! * `folder`: `root/<class>/<image>` or `root/{train,test}/<class>/<image>`.
//!   Class ids follow the sorted directory names.

mod cifar;
mod folder;
mod manifest;
mod synthetic;
mod transform;

use std::fmt;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use manifest::{verify_manifest, write_manifest};
pub use synthetic::{generate as generate_synthetic, SyntheticSpec};
pub use transform::{augment, make_multires_batch, resize_bilinear};

/// Input resolutions in strictly decreasing order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct ResolutionSet(Vec<usize>);

impl ResolutionSet {
    /// Sorts `values` descending; rejects empty sets, zeros and duplicates.
    pub fn new(mut values: Vec<usize>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("resolution set is empty"));
        }
        if values.contains(&0) {
            return Err(Error::invalid("resolutions must be positive"));
        }
        values.sort_unstable_by(|a, b| b.cmp(a));
        if values.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("resolution set has duplicates"));
        }
        Ok(ResolutionSet(values))
    }

    pub fn single(resolution: usize) -> Result<Self> {
        Self::new(vec![resolution])
    }

    /// `{32, 28, 24, 20}`.
    pub fn cifar() -> Self {
        ResolutionSet(vec![32, 28, 24, 20])
    }

    /// `{224, 192, 160, 128}`.
    pub fn imagenet() -> Self {
        ResolutionSet(vec![224, 192, 160, 128])
    }

    pub fn values(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> usize {
        self.0[0]
    }

    pub fn min(&self) -> usize {
        *self.0.last().expect("non-empty")
    }

    pub fn contains(&self, r: usize) -> bool {
        self.0.contains(&r)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<Vec<usize>> for ResolutionSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        ResolutionSet::new(v)
    }
}

impl From<ResolutionSet> for Vec<usize> {
    fn from(r: ResolutionSet) -> Vec<usize> {
        r.0
    }
}

/// Images at one resolution plus their class ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Batch { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSource {
    Cifar10 { root: PathBuf },
    Cifar100 { root: PathBuf },
    Folder {
        root: PathBuf,
        #[serde(default = "default_side")]
        side: usize,
    },
    /// Procedurally generated class patterns, for smoke runs and tests.
    Synthetic(SyntheticSpec),
}

fn default_side() -> usize {
    32
}

/// Per-channel normalization applied when converting to tensors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    pub const CIFAR10: Normalization =
        Normalization { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] };
    pub const CIFAR100: Normalization =
        Normalization { mean: [0.5071, 0.4865, 0.4409], std: [0.2673, 0.2564, 0.2762] };
    pub const UNIT: Normalization = Normalization { mean: [0.5; 3], std: [0.25; 3] };
}

/// In-memory RGB images of one split, in a seed-determined order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub side: usize,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
    images: Vec<u8>,
    labels: Vec<usize>,
}

impl Dataset {
    pub(crate) fn from_raw(
        num_classes: usize,
        side: usize,
        class_names: Vec<String>,
        normalization: Normalization,
        images: Vec<u8>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let sample = 3 * side * side;
        if images.len() != labels.len() * sample {
            return Err(Error::invalid("image buffer does not match label count"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset { num_classes, side, class_names, normalization, images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn raw_image(&self, index: usize) -> &[u8] {
        let sample = 3 * self.side * self.side;
        &self.images[index * sample..(index + 1) * sample]
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * 3 * self.side * self.side);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.raw_image(i));
            labels.push(self.labels[i]);
        }
        Dataset { images, labels, class_names: self.class_names.clone(), ..*self }
    }

    /// First `n` samples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Normalized, unaugmented batch of the given samples at native size.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let side = self.side;
        let plane = side * side;
        let mut data = Vec::with_capacity(indices.len() * 3 * plane);
        let mut labels = Vec::with_capacity(indices.len());
        let Normalization { mean, std } = self.normalization;
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            let raw = self.raw_image(i);
            for c in 0..3 {
                data.extend(raw[c * plane..(c + 1) * plane].iter().map(|&v| (v as f32 / 255.0 - mean[c]) / std[c]));
            }
            labels.push(self.labels[i]);
        }
        Batch::new(Tensor::from_vec([indices.len(), 3, side, side], data)?, labels, self.num_classes)
    }

    /// Clean batches of `batch_size` covering every sample in order, each
    /// resized to `resolution`.
    pub fn eval_batches(&self, batch_size: usize, resolution: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        let batch_size = batch_size.max(1);
        (0..self.len()).step_by(batch_size).map(move |start| {
            let idx: Vec<usize> = (start..(start + batch_size).min(self.len())).collect();
            let b = self.batch(&idx)?;
            let images = resize_bilinear(&b.images, resolution, resolution)?;
            Ok(Batch { images, labels: b.labels })
        })
    }
}

/// Loads one split. Ordering is a seeded shuffle; the validation split is
/// the tail `val_size` samples of the shuffled training set, so train and val
/// never overlap.
pub fn load_dataset(source: &DatasetSource, split: Split, seed: u64, val_size: usize) -> Result<Dataset> {
    let (train, test) = match source {
        DatasetSource::Cifar10 { root } => cifar::load_cifar10(root)?,
        DatasetSource::Cifar100 { root } => cifar::load_cifar100(root)?,
        DatasetSource::Folder { root, side } => folder::load_folder(root, *side, seed)?,
        DatasetSource::Synthetic(spec) => synthetic::generate(spec)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match split {
        Split::Train | Split::Val => {
            if val_size >= train.len() {
                return Err(Error::InsufficientData(format!(
                    "validation size {val_size} leaves no training samples out of {}",
                    train.len()
                )));
            }
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut rng);
            let cut = train.len() - val_size;
            Ok(match split {
                Split::Train => train.subset(&order[..cut]),
                _ => train.subset(&order[cut..]),
            })
        }
        Split::Test => {
            let mut order: Vec<usize> = (0..test.len()).collect();
            order.shuffle(&mut rng);
            Ok(test.subset(&order))
        }
    }
}
