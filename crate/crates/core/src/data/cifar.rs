use std::path::{Path, PathBuf};

use super::{Dataset, Normalization};
use crate::error::{Error, Result};

const SIDE: usize = 32;
const IMAGE_BYTES: usize = 3 * SIDE * SIDE;

fn resolve(root: &Path, nested: &str, probe: &str) -> PathBuf {
    let inner = root.join(nested);
    if inner.join(probe).exists() {
        inner
    } else {
        root.to_path_buf()
    }
}

/// Parses fixed-size records of `label_bytes` header bytes followed by a
/// 3x32x32 image; the label is the last header byte.
fn read_records(path: &Path, label_bytes: usize, num_classes: usize) -> Result<(Vec<u8>, Vec<usize>)> {
    let ingest = |reason: String| Error::Ingestion { path: path.to_path_buf(), reason };
    let bytes = std::fs::read(path).map_err(|e| ingest(e.to_string()))?;
    let record = label_bytes + IMAGE_BYTES;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(ingest(format!("size {} is not a multiple of the {record}-byte record", bytes.len())));
    }
    let n = bytes.len() / record;
    let mut images = Vec::with_capacity(n * IMAGE_BYTES);
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(record).enumerate() {
        let label = rec[label_bytes - 1] as usize;
        if label >= num_classes {
            return Err(ingest(format!("record {i} has label {label} >= {num_classes}")));
        }
        labels.push(label);
        images.extend_from_slice(&rec[label_bytes..]);
    }
    Ok((images, labels))
}

fn class_names(path: &Path, num_classes: usize) -> Vec<String> {
    std::fs::read_to_string(path)
        .ok()
        .map(|t| t.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect::<Vec<_>>())
        .filter(|names| names.len() == num_classes)
        .unwrap_or_else(|| (0..num_classes).map(|i| i.to_string()).collect())
}

pub(super) fn load_cifar10(root: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve(root, "cifar-10-batches-bin", "test_batch.bin");
    let names = class_names(&dir.join("batches.meta.txt"), 10);
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for i in 1..=5 {
        let (im, lb) = read_records(&dir.join(format!("data_batch_{i}.bin")), 1, 10)?;
        images.extend(im);
        labels.extend(lb);
    }
    let train = Dataset::from_raw(10, SIDE, names.clone(), Normalization::CIFAR10, images, labels)?;
    let (im, lb) = read_records(&dir.join("test_batch.bin"), 1, 10)?;
    let test = Dataset::from_raw(10, SIDE, names, Normalization::CIFAR10, im, lb)?;
    Ok((train, test))
}

pub(super) fn load_cifar100(root: &Path) -> Result<(Dataset, Dataset)> {
    let dir = resolve(root, "cifar-100-binary", "test.bin");
    let names = class_names(&dir.join("fine_label_names.txt"), 100);
    let (im, lb) = read_records(&dir.join("train.bin"), 2, 100)?;
    let train = Dataset::from_raw(100, SIDE, names.clone(), Normalization::CIFAR100, im, lb)?;
    let (im, lb) = read_records(&dir.join("test.bin"), 2, 100)?;
    let test = Dataset::from_raw(100, SIDE, names, Normalization::CIFAR100, im, lb)?;
    Ok((train, test))
}
