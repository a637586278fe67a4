//! Batch normalization and post-training statistics calibration.
//!
//! During training every sampled sub-network normalizes with the statistics
//! of the current batch. After training, [`calibrate`] streams a small number
//! of samples through one configuration and records per-layer population
//! mean and variance, which [`NormMode::Calibrated`] then uses for evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spec::{ConfigKey, LayerKind, SubnetConfig};
use crate::subnet::SubnetView;
use crate::tensor::Tensor;

pub const BN_EPSILON: f32 = 1e-5;
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 2000;
pub const BANK_FORMAT_VERSION: u32 = 1;

/// How normalization layers obtain their statistics.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a> {
    /// Statistics of the current batch (training). Needs at least two samples.
    Batch,
    /// Stored statistics for exactly this configuration.
    Calibrated(&'a BnEntry),
    /// Each sample normalized with its own statistics (a batch of one).
    PerSample,
}

/// Saved per-channel statistics for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn apply_affine(x: &Tensor, mean: &[f32], inv_std: &[f32], gamma: &[f32], beta: &[f32]) -> Tensor {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let mut out = x.clone();
    for s in 0..n {
        let ys = out.sample_mut(s);
        for ch in 0..c {
            let scale = gamma[ch] * inv_std[ch];
            let shift = beta[ch] - mean[ch] * scale;
            ys[ch * plane..(ch + 1) * plane].iter_mut().for_each(|v| *v = *v * scale + shift);
        }
    }
    out
}

/// Per-channel mean and biased variance over batch and spatial positions.
fn batch_moments(x: &Tensor) -> (Vec<f32>, Vec<f32>) {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let count = (n * plane) as f64;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        for s in 0..n {
            sum += x.sample(s)[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = sum / count;
        let mut sq = 0.0f64;
        for s in 0..n {
            sq += x.sample(s)[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m as f32;
        var[ch] = (sq / count) as f32;
    }
    (mean, var)
}

/// Normalizes with the current batch's statistics, then applies the sliced
/// scale and shift.
pub fn train_mode_normalize(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<Tensor> {
    train_mode_forward(x, gamma, beta).map(|(y, _)| y)
}

pub(crate) fn train_mode_forward(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Result<(Tensor, BnCache)> {
    if x.batch() < 2 {
        return Err(Error::DegenerateBatch(format!(
            "batch statistics need at least 2 samples, got {}",
            x.batch()
        )));
    }
    let (mean, var) = batch_moments(x);
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
    let y = apply_affine(x, &mean, &inv_std, gamma, beta);
    Ok((y, BnCache { mean, inv_std }))
}

/// Normalizes every sample with its own per-channel statistics.
pub(crate) fn per_sample_normalize(x: &Tensor, gamma: &[f32], beta: &[f32]) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros(x.shape());
    for s in 0..n {
        let one = Tensor::from_vec([1, c, h, w], x.sample(s).to_vec()).expect("sample shape");
        let (mean, var) = batch_moments(&one);
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let y = apply_affine(&one, &mean, &inv_std, gamma, beta);
        out.sample_mut(s).copy_from_slice(y.data());
    }
    out
}

/// Normalizes with calibrated statistics of a single layer.
pub fn eval_mode_normalize(x: &Tensor, stats: &LayerStats, gamma: &[f32], beta: &[f32]) -> Result<Tensor> {
    if stats.mean.len() != x.channels() || stats.var.len() != x.channels() {
        return Err(Error::invalid(format!(
            "stored statistics cover {} channels, activations have {}",
            stats.mean.len(),
            x.channels()
        )));
    }
    let mean: Vec<f32> = stats.mean.iter().map(|&m| m as f32).collect();
    let inv_std: Vec<f32> = stats.var.iter().map(|&v| 1.0 / (v as f32 + BN_EPSILON).sqrt()).collect();
    Ok(apply_affine(x, &mean, &inv_std, gamma, beta))
}

/// Returns `(dx, dgamma, dbeta)` for a batch-statistics forward pass.
pub(crate) fn train_mode_backward(
    x: &Tensor,
    cache: &BnCache,
    gamma: &[f32],
    dy: &Tensor,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let [n, c, _, _] = x.shape();
    let plane = x.plane();
    let count = (n * plane) as f32;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for s in 0..n {
        let xs = x.sample(s);
        let gs = dy.sample(s);
        for ch in 0..c {
            let (m, is) = (cache.mean[ch], cache.inv_std[ch]);
            let range = ch * plane..(ch + 1) * plane;
            for (xv, gv) in xs[range.clone()].iter().zip(&gs[range]) {
                dgamma[ch] += gv * (xv - m) * is;
                dbeta[ch] += gv;
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    for s in 0..n {
        let xs = x.sample(s);
        let gs = dy.sample(s);
        let ds = dx.sample_mut(s);
        for ch in 0..c {
            let (m, is) = (cache.mean[ch], cache.inv_std[ch]);
            let k = gamma[ch] * is / count;
            for i in ch * plane..(ch + 1) * plane {
                let xhat = (xs[i] - m) * is;
                ds[i] = k * (count * gs[i] - dbeta[ch] - xhat * dgamma[ch]);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Running per-channel count, mean and sum of squared deviations in `f64`.
#[derive(Debug, Clone)]
pub struct StreamingMoments {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl StreamingMoments {
    pub fn new(channels: usize) -> Self {
        StreamingMoments { count: 0, mean: vec![0.0; channels], m2: vec![0.0; channels] }
    }

    /// Folds one batch of activations in: Welford within the batch, Chan's
    /// pairwise merge across batches.
    pub fn update(&mut self, x: &Tensor) {
        let [n, c, _, _] = x.shape();
        assert_eq!(c, self.mean.len(), "channel count changed between batches");
        let plane = x.plane();
        let batch_count = (n * plane) as u64;
        if batch_count == 0 {
            return;
        }
        for ch in 0..c {
            let (mut k, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
            for s in 0..n {
                for &v in &x.sample(s)[ch * plane..(ch + 1) * plane] {
                    k += 1;
                    let d = v as f64 - mean;
                    mean += d / k as f64;
                    m2 += d * (v as f64 - mean);
                }
            }
            let total = self.count + batch_count;
            let delta = mean - self.mean[ch];
            self.mean[ch] += delta * batch_count as f64 / total as f64;
            self.m2[ch] += m2 + delta * delta * self.count as f64 * batch_count as f64 / total as f64;
        }
        self.count += batch_count;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Population variance, clamped at zero.
    pub fn variance(&self) -> Vec<f64> {
        if self.count == 0 {
            return vec![0.0; self.m2.len()];
        }
        self.m2.iter().map(|m| (m / self.count as f64).max(0.0)).collect()
    }
}

/// Calibrated statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub layer: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of activation values (samples x spatial positions) observed.
    pub count: u64,
}

/// Statistics for every normalization layer of one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnEntry {
    pub config: SubnetConfig,
    /// Number of input samples streamed through the network.
    pub samples: usize,
    pub layers: Vec<LayerStats>,
}

impl BnEntry {
    pub fn layer(&self, index: usize) -> Option<&LayerStats> {
        self.layers.iter().find(|l| l.layer == index)
    }
}

/// Per-configuration normalization statistics collected after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnStatsBank {
    pub version: u32,
    pub spec_hash: String,
    pub calibration_sample_budget: usize,
    #[serde(with = "entries_as_list")]
    entries: BTreeMap<ConfigKey, BnEntry>,
}

mod entries_as_list {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::BnEntry;
    use crate::spec::ConfigKey;

    pub fn serialize<S: Serializer>(map: &BTreeMap<ConfigKey, BnEntry>, s: S) -> Result<S::Ok, S::Error> {
        map.values().collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<ConfigKey, BnEntry>, D::Error> {
        let list = Vec::<BnEntry>::deserialize(d)?;
        Ok(list.into_iter().map(|e| (e.config.key(), e)).collect())
    }
}

impl BnStatsBank {
    pub fn new(spec_hash: impl Into<String>, calibration_sample_budget: usize) -> Self {
        BnStatsBank {
            version: BANK_FORMAT_VERSION,
            spec_hash: spec_hash.into(),
            calibration_sample_budget,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, entry: BnEntry) {
        self.entries.insert(entry.config.key(), entry);
    }

    pub fn get(&self, config: &SubnetConfig) -> Result<&BnEntry> {
        self.entries
            .get(&config.key())
            .ok_or_else(|| Error::CalibrationRequired(config.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &BnEntry> {
        self.entries.values()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(path: &Path, spec_hash: &str) -> Result<Self> {
        let bank: BnStatsBank = serde_json::from_slice(&std::fs::read(path)?)?;
        if bank.version != BANK_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported statistics bank version {}", bank.version)));
        }
        if bank.spec_hash != spec_hash {
            return Err(Error::Checkpoint("statistics bank was collected for a different model spec".into()));
        }
        Ok(bank)
    }
}

/// Streams up to `budget` samples through `view` at `config.resolution` in
/// chunks of `batch_size`, normalizing with batch statistics, and records
/// population mean and variance at every normalization layer.
///
/// The stream must already be at the config's resolution. Weights are not
/// touched; the same stream order always yields the same entry.
pub fn calibrate<I>(
    view: &SubnetView<'_>,
    config: SubnetConfig,
    data: I,
    budget: usize,
    batch_size: usize,
) -> Result<BnEntry>
where
    I: IntoIterator<Item = Tensor>,
{
    if budget == 0 || batch_size == 0 {
        return Err(Error::invalid("calibration budget and batch size must be positive"));
    }
    if view.width().key() != config.width.key() {
        return Err(Error::invalid(format!(
            "view width {} does not match calibration config {config}",
            view.width()
        )));
    }
    let arch = view.arch();
    let norm_layers: Vec<usize> = view
        .spec()
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.kind == LayerKind::Normalization)
        .map(|(i, _)| i)
        .collect();
    let mut moments: BTreeMap<usize, StreamingMoments> = norm_layers
        .iter()
        .map(|&i| (i, StreamingMoments::new(arch.layers[i].in_channels)))
        .collect();

    let mut pending: Vec<Tensor> = Vec::new();
    for sample in data {
        if pending.len() == budget {
            break;
        }
        if sample.height() != config.resolution || sample.width() != config.resolution {
            return Err(Error::invalid(format!(
                "calibration sample is {}x{}, config needs {}",
                sample.height(),
                sample.width(),
                config.resolution
            )));
        }
        let take = sample.batch().min(budget - pending.len());
        for s in 0..take {
            pending.push(sample.select(&[s]));
        }
    }
    if pending.is_empty() {
        return Err(Error::InsufficientData("calibration stream is empty".into()));
    }

    for chunk in chunk_sizes(pending.len(), batch_size)?.into_iter().scan(0usize, |start, len| {
        let range = *start..*start + len;
        *start += len;
        Some(range)
    }) {
        let batch = stack(&pending[chunk])?;
        view.forward_observed(&batch, NormMode::Batch, &mut |layer, x| {
            if let Some(m) = moments.get_mut(&layer) {
                m.update(x);
            }
        })?;
    }

    let layers = moments
        .into_iter()
        .map(|(layer, m)| LayerStats { layer, mean: m.mean().to_vec(), var: m.variance(), count: m.count() })
        .collect();
    Ok(BnEntry { config, samples: pending.len(), layers })
}

/// Splits `total` into chunks of at most `batch` without leaving a
/// single-sample chunk (batch statistics need two samples).
fn chunk_sizes(total: usize, batch: usize) -> Result<Vec<usize>> {
    if total < 2 {
        return Err(Error::DegenerateBatch("calibration needs at least 2 samples".into()));
    }
    let batch = batch.max(2);
    let mut sizes = vec![batch; total / batch];
    let rest = total % batch;
    if rest == 1 {
        match sizes.last_mut() {
            Some(last) => *last += 1,
            None => sizes.push(1),
        }
    } else if rest > 0 {
        sizes.push(rest);
    }
    Ok(sizes)
}

/// Concatenates single- or multi-sample tensors along the batch axis.
pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::invalid("cannot stack zero tensors"))?;
    let [_, c, h, w] = first.shape();
    let mut data = Vec::new();
    let mut n = 0;
    for p in parts {
        if p.shape()[1..] != [c, h, w] {
            return Err(Error::invalid("cannot stack tensors of different shapes"));
        }
        n += p.batch();
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec([n, c, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(len: usize, seed: u32) -> Vec<f32> {
        (0..len).map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) % 1000) as f32 / 250.0 - 2.0).collect()
    }

    #[test]
    fn constant_batch_gives_zero_mean() {
        let x = Tensor::from_vec([4, 2, 3, 3], vec![3.5; 72]).unwrap();
        let y = train_mode_normalize(&x, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn output_moments_follow_scale_and_shift() {
        let x = Tensor::from_vec([64, 2, 4, 4], pseudo(64 * 32, 9)).unwrap();
        let gamma = [2.0f32, 0.5];
        let beta = [-1.0f32, 3.0];
        let y = train_mode_normalize(&x, &gamma, &beta).unwrap();
        let (mean, var) = batch_moments(&y);
        for ch in 0..2 {
            assert!((mean[ch] - beta[ch]).abs() < 1e-3);
            assert!((var[ch].sqrt() - gamma[ch]).abs() < 1e-3);
        }
    }

    #[test]
    fn single_sample_batch_is_degenerate() {
        let x = Tensor::zeros([1, 2, 3, 3]);
        assert!(matches!(train_mode_normalize(&x, &[1.0; 2], &[0.0; 2]), Err(Error::DegenerateBatch(_))));
    }

    #[test]
    fn streaming_moments_match_two_pass() {
        let mut acc = StreamingMoments::new(3);
        let mut all: Vec<Vec<f64>> = vec![Vec::new(); 3];
        for (i, n) in [5usize, 2, 7, 3].into_iter().enumerate() {
            let x = Tensor::from_vec([n, 3, 2, 2], pseudo(n * 12, i as u32 + 100).iter().map(|v| v * 10.0 + 50.0).collect()).unwrap();
            acc.update(&x);
            for s in 0..n {
                for ch in 0..3 {
                    all[ch].extend(x.sample(s)[ch * 4..(ch + 1) * 4].iter().map(|&v| v as f64));
                }
            }
        }
        for ch in 0..3 {
            let m = all[ch].iter().sum::<f64>() / all[ch].len() as f64;
            let v = all[ch].iter().map(|x| (x - m).powi(2)).sum::<f64>() / all[ch].len() as f64;
            assert!((acc.mean()[ch] - m).abs() <= 1e-9 * m.abs());
            assert!((acc.variance()[ch] - v).abs() <= 1e-9 * v);
        }
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        let x = Tensor::from_vec([3, 2, 2, 2], pseudo(24, 3)).unwrap();
        let dy = Tensor::from_vec([3, 2, 2, 2], pseudo(24, 77)).unwrap();
        let gamma = [1.3f32, 0.7];
        let beta = [0.1f32, -0.2];
        let loss = |x: &Tensor| -> f64 {
            let y = train_mode_normalize(x, &gamma, &beta).unwrap();
            y.data().iter().zip(dy.data()).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let (_, cache) = train_mode_forward(&x, &gamma, &beta).unwrap();
        let (dx, _, _) = train_mode_backward(&x, &cache, &gamma, &dy);
        let eps = 1e-2f32;
        for i in 0..24 {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (loss(&xp) - loss(&xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data()[i] as f64).abs() < 2e-2, "{i}: {fd} vs {}", dx.data()[i]);
        }
    }

    #[test]
    fn chunking_never_leaves_a_single_sample() {
        assert_eq!(chunk_sizes(9, 4).unwrap(), vec![4, 5]);
        assert_eq!(chunk_sizes(10, 4).unwrap(), vec![4, 4, 2]);
        assert_eq!(chunk_sizes(3, 8).unwrap(), vec![3]);
        assert!(chunk_sizes(1, 8).is_err());
    }
}
