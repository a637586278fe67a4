//! Width x resolution query tables and budget-constrained selection.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flops;
use crate::loss::count_correct;
use crate::norm::{calibrate, BnEntry, BnStatsBank, NormMode};
use crate::params::ParamStore;
use crate::spec::{ConfigKey, SlimmableModelSpec, SubnetConfig, WidthMultiplier};
use crate::subnet::{materialize_subnet, SubnetView};
use crate::tensor::Tensor;

pub const WIDTH_STEP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub width: WidthMultiplier,
    pub resolution: usize,
    pub mflops: f64,
    pub top1: f64,
}

impl TableRow {
    pub fn config(&self) -> SubnetConfig {
        SubnetConfig { width: self.width, resolution: self.resolution }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryTable {
    pub rows: Vec<TableRow>,
}

/// Widths `lower, lower + step, ...` up to and including 1.0.
pub fn width_grid(lower: WidthMultiplier, step: f64) -> Result<Vec<WidthMultiplier>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid("width step must be in (0, 1]"));
    }
    let lo = lower.value();
    let n = ((1.0 - lo) / step + 1e-9).floor() as usize;
    let mut grid = (0..=n)
        .map(|i| WidthMultiplier::new(((lo + i as f64 * step) * 1e6).round() / 1e6))
        .collect::<Result<Vec<_>>>()?;
    if grid.last().is_some_and(|w| !w.is_full()) {
        grid.push(WidthMultiplier::FULL);
    }
    Ok(grid)
}

/// Clean single-resolution batches of the first `budget` samples.
pub fn calibration_stream(dataset: &Dataset, resolution: usize, budget: usize, batch_size: usize) -> Result<Vec<Tensor>> {
    dataset.take(budget).eval_batches(batch_size, resolution).map(|b| b.map(|b| b.images)).collect()
}

/// Top-1 accuracy of `view` over `dataset` at `resolution`.
pub fn evaluate(view: &SubnetView<'_>, mode: NormMode<'_>, dataset: &Dataset, resolution: usize, batch_size: usize) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InsufficientData("evaluation set is empty".into()));
    }
    let mut correct = 0;
    for batch in dataset.eval_batches(batch_size, resolution) {
        let batch = batch?;
        correct += count_correct(&view.forward(&batch.images, mode)?, &batch.labels);
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Calibrates `config` from the head of `dataset`.
pub fn calibrate_config(
    spec: &SlimmableModelSpec,
    params: &ParamStore,
    config: SubnetConfig,
    dataset: &Dataset,
    budget: usize,
    batch_size: usize,
) -> Result<BnEntry> {
    let view = materialize_subnet(spec, params, config.width)?;
    calibrate(&view, config, calibration_stream(dataset, config.resolution, budget, batch_size)?, budget, batch_size)
}

/// Where per-config normalization statistics come from while building a table.
pub enum Calibration<'a> {
    /// Use only what the bank already holds.
    Stored,
    /// Calibrate missing configs from this dataset and add them to the bank.
    Inline(&'a Dataset),
}

/// Evaluates every `(width, resolution)` pair with its calibrated statistics.
#[allow(clippy::too_many_arguments)]
pub fn build_table(
    spec: &SlimmableModelSpec,
    params: &ParamStore,
    bank: &mut BnStatsBank,
    calibration: Calibration<'_>,
    validation: &Dataset,
    widths: &[WidthMultiplier],
    resolutions: &[usize],
    batch_size: usize,
) -> Result<QueryTable> {
    if widths.is_empty() || resolutions.is_empty() {
        return Err(Error::invalid("width and resolution grids must be non-empty"));
    }
    let mut rows = Vec::with_capacity(widths.len() * resolutions.len());
    for &resolution in resolutions {
        for &width in widths {
            let config = SubnetConfig { width, resolution };
            let mflops = flops::mflops(spec, config)?;
            if bank.get(&config).is_err() {
                match calibration {
                    Calibration::Stored => return Err(Error::CalibrationRequired(config.to_string())),
                    Calibration::Inline(ds) => {
                        let entry = calibrate_config(spec, params, config, ds, bank.calibration_sample_budget, batch_size)?;
                        bank.insert(entry);
                    }
                }
            }
            let entry = bank.get(&config)?;
            let view = materialize_subnet(spec, params, width)?;
            let top1 = evaluate(&view, NormMode::Calibrated(entry), validation, resolution, batch_size)?;
            log::debug!("{config}: {mflops:.2} MFLOPs, top-1 {top1:.4}");
            rows.push(TableRow { width, resolution, mflops, top1 });
        }
    }
    Ok(QueryTable { rows })
}

fn better(a: &TableRow, b: &TableRow) -> bool {
    // Higher accuracy, then cheaper, then lower resolution, then narrower.
    if a.top1 != b.top1 {
        return a.top1 > b.top1;
    }
    if a.mflops != b.mflops {
        return a.mflops < b.mflops;
    }
    if a.resolution != b.resolution {
        return a.resolution < b.resolution;
    }
    a.width.key() < b.width.key()
}

impl QueryTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn min_mflops(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.mflops).min_by(f64::total_cmp)
    }

    pub fn max_mflops(&self) -> Option<f64> {
        self.rows.iter().map(|r| r.mflops).max_by(f64::total_cmp)
    }

    /// Most accurate row within `budget` MFLOPs. Ties go to lower cost, then
    /// lower resolution, then narrower width.
    pub fn select(&self, budget: f64) -> Result<&TableRow> {
        if budget.is_nan() {
            return Err(Error::invalid("budget is NaN"));
        }
        let cheapest = self.min_mflops().ok_or_else(|| Error::invalid("query table is empty"))?;
        self.rows
            .iter()
            .filter(|r| r.mflops <= budget)
            .fold(None, |best: Option<&TableRow>, r| match best {
                Some(b) if !better(r, b) => Some(b),
                _ => Some(r),
            })
            .ok_or(Error::InfeasibleBudget { budget, cheapest })
    }

    /// Rows no other row beats on accuracy at equal or lower cost, sorted by
    /// cost (then resolution and width).
    pub fn frontier(&self) -> Vec<TableRow> {
        let mut sorted = self.rows.clone();
        sorted.sort_by(|a, b| {
            a.mflops
                .total_cmp(&b.mflops)
                .then(a.resolution.cmp(&b.resolution))
                .then(a.width.key().cmp(&b.width.key()))
        });
        let mut out = Vec::new();
        let mut i = 0;
        let mut best_below = f64::NEG_INFINITY;
        while i < sorted.len() {
            let j = i + sorted[i..].iter().take_while(|r| r.mflops == sorted[i].mflops).count();
            let group_best = sorted[i..j].iter().map(|r| r.top1).fold(best_below, f64::max);
            out.extend(sorted[i..j].iter().filter(|r| r.top1 >= group_best));
            best_below = group_best;
            i = j;
        }
        out
    }

    /// Every grid pair appears exactly once.
    pub fn check_grid(&self, widths: &[WidthMultiplier], resolutions: &[usize]) -> Result<()> {
        let expected: BTreeSet<ConfigKey> = resolutions
            .iter()
            .flat_map(|&resolution| widths.iter().map(move |&width| SubnetConfig { width, resolution }.key()))
            .collect();
        let seen: Vec<ConfigKey> = self.rows.iter().map(|r| r.config().key()).collect();
        let unique: BTreeSet<ConfigKey> = seen.iter().copied().collect();
        if unique.len() != seen.len() || unique != expected {
            return Err(Error::ConstraintViolation("query table does not cover the grid exactly once".into()));
        }
        Ok(())
    }

    /// Cost strictly increases with width at every resolution.
    pub fn check_monotone_cost(&self) -> Result<()> {
        let resolutions: BTreeSet<usize> = self.rows.iter().map(|r| r.resolution).collect();
        for res in resolutions {
            let mut rows: Vec<&TableRow> = self.rows.iter().filter(|r| r.resolution == res).collect();
            rows.sort_by_key(|r| r.width.key());
            if let Some(w) = rows.windows(2).find(|w| w[1].mflops <= w[0].mflops) {
                return Err(Error::ConstraintViolation(format!(
                    "cost does not increase from width {} to {} at resolution {res}",
                    w[0].width, w[1].width
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        rows_to_csv(&self.rows)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next().map(str::trim) {
            Some("width,resolution,mflops,top1") => {}
            _ => return Err(Error::invalid("query table CSV must start with 'width,resolution,mflops,top1'")),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let bad = || Error::invalid(format!("malformed query table row {}: '{line}'", n + 2));
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(bad());
            }
            let width = WidthMultiplier::new(f[0].parse().map_err(|_| bad())?)?;
            let resolution = f[1].parse().map_err(|_| bad())?;
            let mflops: f64 = f[2].parse().map_err(|_| bad())?;
            let top1: f64 = f[3].parse().map_err(|_| bad())?;
            if !(mflops.is_finite() && mflops >= 0.0 && (0.0..=1.0).contains(&top1)) {
                return Err(bad());
            }
            rows.push(TableRow { width, resolution, mflops, top1 });
        }
        Ok(QueryTable { rows })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
        Self::from_csv(&text)
    }
}

pub fn rows_to_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("width,resolution,mflops,top1\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.6},{:.6}\n", r.width.value(), r.resolution, r.mflops, r.top1));
    }
    out
}

pub fn select_config(table: &QueryTable, budget: f64) -> Result<SubnetConfig> {
    table.select(budget).map(TableRow::config)
}

pub fn frontier(table: &QueryTable) -> Vec<TableRow> {
    table.frontier()
}
