//! Run orchestration: train, calibrate, tabulate, extract the frontier and
//! compare runs on a shared cost axis.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_dataset, Dataset, DatasetSource, ResolutionSet, Split};
use crate::error::{Error, Result};
use crate::flops;
use crate::norm::{BnStatsBank, NormMode, DEFAULT_CALIBRATION_SAMPLES};
use crate::planner::{self, build_table, width_grid, Calibration, QueryTable, TableRow, WIDTH_STEP};
use crate::spec::{SlimmableModelSpec, SubnetConfig, WidthMultiplier};
use crate::subnet::materialize_subnet;
use crate::params::ParamStore;
use crate::trainer::{run_training, EpochMetrics, TrainMode, TrainOutcome, TrainSchedule};

fn default_validation_size() -> usize {
    5000
}

fn default_calibration_samples() -> usize {
    DEFAULT_CALIBRATION_SAMPLES
}

fn default_eval_batch() -> usize {
    100
}

fn default_width_step() -> f64 {
    WIDTH_STEP
}

/// One experiment, read from TOML.
///
/// `spec` is either a path to a backbone description or `preset:<name>`
/// (`desk_mobilenet`, `mobilenet_v1`); presets take their class count from
/// the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub mode: TrainMode,
    pub spec: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    #[serde(default = "default_validation_size")]
    pub validation_size: usize,
    #[serde(default)]
    pub width_lower_bound: Option<f64>,
    #[serde(default)]
    pub resolutions: Option<Vec<usize>>,
    /// Resolutions to tabulate; defaults to the training set of resolutions.
    #[serde(default)]
    pub table_resolutions: Option<Vec<usize>>,
    /// Width trained by `independent` mode.
    #[serde(default)]
    pub independent_width: Option<f64>,
    #[serde(default = "default_width_step")]
    pub width_step: f64,
    #[serde(default = "default_calibration_samples")]
    pub calibration_samples: usize,
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
    pub schedule: TrainSchedule,
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config is representable as TOML")
    }

    /// Schema-level checks that need no data.
    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("name must not be empty".into()));
        }
        self.schedule.validate()?;
        if self.calibration_samples < 2 || self.eval_batch_size == 0 {
            return Err(Error::Config("calibration_samples must be >= 2 and eval_batch_size > 0".into()));
        }
        if !(self.width_step > 0.0 && self.width_step <= 1.0) {
            return Err(Error::Config("width_step must be in (0, 1]".into()));
        }
        if let Some(w) = self.width_lower_bound {
            WidthMultiplier::new(w).map_err(config_err)?;
        }
        if let Some(w) = self.independent_width {
            WidthMultiplier::new(w).map_err(config_err)?;
        }
        for r in [&self.resolutions, &self.table_resolutions].into_iter().flatten() {
            ResolutionSet::new(r.clone()).map_err(config_err)?;
        }
        let probe = self.resolve_spec(None)?;
        if let Some(r) = &self.table_resolutions {
            for &res in r {
                probe.check_resolution(res).map_err(config_err)?;
            }
        }
        let lower = probe.width_lower_bound.value();
        if self.mode.is_slimmable() && lower >= 1.0 {
            return Err(Error::Config(format!("mode {} needs a width lower bound below 1.0", self.mode)));
        }
        Ok(())
    }

    /// The backbone with this run's overrides applied. With `num_classes`
    /// unknown, presets get 10 classes and files are not checked.
    pub fn resolve_spec(&self, num_classes: Option<usize>) -> Result<SlimmableModelSpec> {
        let base = match self.spec.strip_prefix("preset:") {
            Some("desk_mobilenet") => SlimmableModelSpec::desk_mobilenet(num_classes.unwrap_or(10)),
            Some("mobilenet_v1") => SlimmableModelSpec::mobilenet_v1(num_classes.unwrap_or(10)),
            Some(other) => return Err(Error::Config(format!("unknown preset '{other}'"))),
            None => {
                let spec = SlimmableModelSpec::from_file(Path::new(&self.spec))?;
                if let Some(n) = num_classes.filter(|&n| n != spec.num_classes) {
                    return Err(Error::Config(format!("backbone has {} classes, dataset has {n}", spec.num_classes)));
                }
                spec
            }
        };
        let mut spec = base;
        if let Some(w) = self.width_lower_bound {
            spec = spec.with_lower_bound(WidthMultiplier::new(w).map_err(config_err)?);
        }
        if let Some(r) = &self.resolutions {
            spec = spec.with_resolutions(ResolutionSet::new(r.clone()).map_err(config_err)?).map_err(config_err)?;
        }
        spec.validate().map_err(config_err)?;
        Ok(spec)
    }

    pub fn independent_width(&self) -> Result<WidthMultiplier> {
        WidthMultiplier::new(self.independent_width.unwrap_or(1.0))
    }

    /// Widths and resolutions the query table covers for this mode.
    pub fn table_grid(&self, spec: &SlimmableModelSpec) -> Result<(Vec<WidthMultiplier>, Vec<usize>)> {
        let resolutions = match &self.table_resolutions {
            Some(r) => ResolutionSet::new(r.clone())?.values().to_vec(),
            None => spec.resolutions.values().to_vec(),
        };
        let widths = match self.mode {
            TrainMode::Independent => vec![self.independent_width()?],
            TrainMode::MultiscaleAugSingle => vec![WidthMultiplier::FULL],
            _ => width_grid(spec.width_lower_bound, self.width_step)?,
        };
        let resolutions = match self.mode {
            TrainMode::Independent if self.table_resolutions.is_none() => vec![spec.resolutions.max()],
            _ => resolutions,
        };
        Ok((widths, resolutions))
    }
}

/// Everything needed to re-run and to compare a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub spec_hash: String,
    pub seed: u64,
    pub validation: String,
    pub history: Vec<EpochMetrics>,
    pub checkpoint_path: PathBuf,
    pub bn_stats_path: PathBuf,
    pub table_path: PathBuf,
    pub frontier_path: PathBuf,
    pub frontier: Vec<TableRow>,
    /// Test accuracy of the widest trained configuration at the highest
    /// tabulated resolution.
    pub test_config: SubnetConfig,
    pub test_top1: f64,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// `name/mode/seed`, unique across the usual comparison sets.
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.config.name, self.config.mode, self.seed)
    }
}

/// Output locations of a run.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        RunPaths { dir: dir.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.slimckpt")
    }
    pub fn bn_stats(&self) -> PathBuf {
        self.dir.join("bn_stats.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }
    pub fn table(&self) -> PathBuf {
        self.dir.join("table.csv")
    }
    pub fn frontier(&self) -> PathBuf {
        self.dir.join("frontier.csv")
    }
    pub fn record(&self) -> PathBuf {
        self.dir.join("record.json")
    }
    pub fn failure(&self) -> PathBuf {
        self.dir.join("failure.json")
    }

    /// Refuses to run over existing artifacts unless `force` is set.
    pub fn guard(&self, force: bool) -> Result<()> {
        if force {
            return Ok(());
        }
        for p in [self.checkpoint(), self.bn_stats(), self.table(), self.frontier(), self.record(), self.metrics()] {
            if p.exists() {
                return Err(Error::Overwrite(p));
            }
        }
        Ok(())
    }
}

/// Fails if `path` exists and `force` is not set.
pub fn guard_path(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(Error::Overwrite(path.to_path_buf()));
    }
    Ok(())
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,steps,lr,loss_full,loss_total,train_top1,seconds\n");
    for m in history {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.3}\n",
            m.epoch, m.steps, m.lr, m.loss_full, m.loss_total, m.train_top1, m.seconds
        ));
    }
    out
}

#[derive(Debug, Serialize)]
struct Failure<'a> {
    stage: &'a str,
    error: String,
}

/// Failure of a run, tagged with the stage it happened in.
#[derive(Debug)]
pub struct RunError {
    pub stage: &'static str,
    pub error: Error,
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run failed during {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for RunError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// train -> calibrate -> table -> frontier, writing every artifact
/// atomically into the output directory. A failure is also written to
/// `failure.json` with its stage.
pub fn run(config: &RunConfig, force: bool, on_epoch: impl FnMut(&EpochMetrics)) -> std::result::Result<RunRecord, RunError> {
    let paths = RunPaths::new(&config.output_dir);
    let mut stage = "config";
    let result = run_stages(config, &paths, force, on_epoch, &mut stage);
    result.map_err(|error| {
        if !matches!(error, Error::Overwrite(_)) {
            let body = serde_json::to_vec_pretty(&Failure { stage, error: error.to_string() }).unwrap_or_default();
            let _ = crate::io::write_atomic(&paths.failure(), &body);
        }
        RunError { stage, error }
    })
}

/// Data splits, backbone and table grid of a run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: SlimmableModelSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub widths: Vec<WidthMultiplier>,
    pub resolutions: Vec<usize>,
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.validate()?;
    let train = load_dataset(&config.dataset, Split::Train, config.seed, config.validation_size)?;
    let val = load_dataset(&config.dataset, Split::Val, config.seed, config.validation_size)?;
    let test = load_dataset(&config.dataset, Split::Test, config.seed, config.validation_size)?;
    let spec = config.resolve_spec(Some(train.num_classes))?;
    let (widths, resolutions) = config.table_grid(&spec)?;
    Ok(Prepared { spec, train, val, test, widths, resolutions })
}

/// Trains and writes the checkpoint, metrics and config snapshot.
pub fn train_stage(
    config: &RunConfig,
    prep: &Prepared,
    paths: &RunPaths,
    force: bool,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    guard_path(&paths.checkpoint(), force)?;
    guard_path(&paths.metrics(), force)?;
    crate::io::write_atomic(&paths.config(), config.to_toml_string().as_bytes())?;
    let fixed = config.independent_width()?;
    let outcome = run_training(config.mode, &prep.spec, &prep.train, &config.schedule, fixed, config.seed, on_epoch)?;
    outcome.checkpoint.save(&paths.checkpoint())?;
    crate::io::write_atomic(&paths.metrics(), metrics_csv(&outcome.history).as_bytes())?;
    Ok(outcome)
}

/// Checkpoint of an earlier training stage, checked against the run's spec.
pub fn load_trained(prep: &Prepared, paths: &RunPaths) -> Result<Checkpoint> {
    let ckpt = Checkpoint::load(&paths.checkpoint())?;
    if ckpt.spec.hash() != prep.spec.hash() {
        return Err(Error::Checkpoint("checkpoint was trained with a different backbone".into()));
    }
    Ok(ckpt)
}

/// Calibrates every table config from clean training samples.
pub fn calibrate_stage(config: &RunConfig, prep: &Prepared, params: &ParamStore, paths: &RunPaths, force: bool) -> Result<BnStatsBank> {
    guard_path(&paths.bn_stats(), force)?;
    let mut bank = BnStatsBank::new(prep.spec.hash(), config.calibration_samples);
    for &resolution in &prep.resolutions {
        for &width in &prep.widths {
            let cfg = SubnetConfig { width, resolution };
            bank.insert(planner::calibrate_config(&prep.spec, params, cfg, &prep.train, config.calibration_samples, config.eval_batch_size)?);
        }
    }
    bank.save(&paths.bn_stats())?;
    Ok(bank)
}

#[derive(Debug, Clone)]
pub struct TableOutcome {
    pub table: QueryTable,
    pub frontier: Vec<TableRow>,
    pub test_config: SubnetConfig,
    pub test_top1: f64,
}

/// Builds the query table on the validation split, writes it with its
/// frontier, and measures the widest config on the test split.
pub fn table_stage(
    config: &RunConfig,
    prep: &Prepared,
    params: &ParamStore,
    bank: &mut BnStatsBank,
    paths: &RunPaths,
    force: bool,
) -> Result<TableOutcome> {
    guard_path(&paths.table(), force)?;
    guard_path(&paths.frontier(), force)?;
    let (widths, resolutions) = (&prep.widths, &prep.resolutions);
    let table = build_table(&prep.spec, params, bank, Calibration::Stored, &prep.val, widths, resolutions, config.eval_batch_size)?;
    table.check_grid(widths, resolutions)?;
    table.save(&paths.table())?;
    let frontier = table.frontier();
    crate::io::write_atomic(&paths.frontier(), planner::rows_to_csv(&frontier).as_bytes())?;
    let test_config = SubnetConfig { width: *widths.last().expect("non-empty grid"), resolution: resolutions[0] };
    let view = materialize_subnet(&prep.spec, params, test_config.width)?;
    let entry = bank.get(&test_config)?;
    let test_top1 = planner::evaluate(&view, NormMode::Calibrated(entry), &prep.test, test_config.resolution, config.eval_batch_size)?;
    Ok(TableOutcome { table, frontier, test_config, test_top1 })
}

fn run_stages(
    config: &RunConfig,
    paths: &RunPaths,
    force: bool,
    on_epoch: impl FnMut(&EpochMetrics),
    stage: &mut &'static str,
) -> Result<RunRecord> {
    let start = Instant::now();
    config.validate()?;
    paths.guard(force)?;

    *stage = "data";
    let prep = prepare(config)?;

    *stage = "train";
    let outcome = train_stage(config, &prep, paths, true, on_epoch)?;
    let params = &outcome.checkpoint.params;

    *stage = "calibrate";
    let mut bank = calibrate_stage(config, &prep, params, paths, true)?;

    *stage = "table";
    let tab = table_stage(config, &prep, params, &mut bank, paths, true)?;

    let record = RunRecord {
        config: config.clone(),
        spec_hash: prep.spec.hash(),
        seed: config.seed,
        validation: format!("last {} samples of the seed-shuffled training split", config.validation_size),
        history: outcome.history,
        checkpoint_path: paths.checkpoint(),
        bn_stats_path: paths.bn_stats(),
        table_path: paths.table(),
        frontier_path: paths.frontier(),
        frontier: tab.frontier,
        test_config: tab.test_config,
        test_top1: tab.test_top1,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    crate::io::write_atomic(&paths.record(), &serde_json::to_vec_pretty(&record)?)?;
    Ok(record)
}

/// Lower width bound giving a fixed-resolution model the same minimum cost
/// as a multi-resolution model's narrowest, lowest-resolution config.
pub fn matched_lower_bound(
    spec: &SlimmableModelSpec,
    lower: WidthMultiplier,
    min_resolution: usize,
    fixed_resolution: usize,
    step: f64,
) -> Result<WidthMultiplier> {
    let target = flops::network_cost(spec, SubnetConfig { width: lower, resolution: min_resolution })?.total;
    flops::width_matching_cost(spec, fixed_resolution, target, step)
}

/// Accuracy of the best frontier row within `budget`, if any is affordable.
pub fn accuracy_at(frontier: &[TableRow], budget: f64) -> Option<f64> {
    frontier.iter().filter(|r| r.mflops <= budget).map(|r| r.top1).max_by(f64::total_cmp)
}

/// Cost range both frontiers can serve.
pub fn shared_range(a: &[TableRow], b: &[TableRow]) -> Option<(f64, f64)> {
    let min = |f: &[TableRow]| f.iter().map(|r| r.mflops).min_by(f64::total_cmp);
    let max = |f: &[TableRow]| f.iter().map(|r| r.mflops).max_by(f64::total_cmp);
    let lo = min(a)?.max(min(b)?);
    let hi = max(a)?.min(max(b)?);
    (lo <= hi).then_some((lo, hi))
}

/// `points` budgets evenly spaced over `[lo, hi]`.
pub fn budget_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points <= 1 || hi <= lo {
        return vec![lo];
    }
    (0..points).map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64).collect()
}

/// Fraction of the shared budget grid where `a` is more accurate than `b`
/// (ties count one half). `None` when the cost ranges do not overlap.
pub fn dominance_fraction(a: &[TableRow], b: &[TableRow], points: usize) -> Option<f64> {
    let (lo, hi) = shared_range(a, b)?;
    let grid = budget_grid(lo, hi, points);
    let score: f64 = grid
        .iter()
        .map(|&budget| {
            let (x, y) = (accuracy_at(a, budget).unwrap_or(0.0), accuracy_at(b, budget).unwrap_or(0.0));
            if x > y {
                1.0
            } else if x == y {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    Some(score / grid.len() as f64)
}

/// Mean accuracy difference `a - b` over the budgets in the given fraction
/// of the shared cost range, e.g. `(0.0, 0.25)` for the cheapest quarter.
pub fn mean_gap(a: &[TableRow], b: &[TableRow], from: f64, to: f64, points: usize) -> Option<f64> {
    let (lo, hi) = shared_range(a, b)?;
    let span = hi - lo;
    let grid = budget_grid(lo + from * span, lo + to * span, points);
    let sum: f64 = grid
        .iter()
        .map(|&budget| accuracy_at(a, budget).unwrap_or(0.0) - accuracy_at(b, budget).unwrap_or(0.0))
        .sum();
    Some(sum / grid.len() as f64)
}

pub const COMPARE_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub labels: Vec<String>,
    /// `matrix[i][j]`: fraction of the shared budget grid where run `i` beats
    /// run `j`; `None` for disjoint cost ranges.
    pub matrix: Vec<Vec<Option<f64>>>,
    pub warnings: Vec<String>,
    /// Budgets spanning every run's frontier, with each run's accuracy.
    pub aligned: Vec<(f64, Vec<Option<f64>>)>,
}

pub fn compare(runs: &[(String, Vec<TableRow>)]) -> Result<Comparison> {
    if runs.len() < 2 {
        return Err(Error::invalid("comparison needs at least two runs"));
    }
    if let Some((label, _)) = runs.iter().find(|(_, f)| f.is_empty()) {
        return Err(Error::invalid(format!("run '{label}' has an empty frontier")));
    }
    let mut warnings = Vec::new();
    let mut matrix = vec![vec![None; runs.len()]; runs.len()];
    for (i, (la, a)) in runs.iter().enumerate() {
        for (j, (lb, b)) in runs.iter().enumerate() {
            matrix[i][j] = dominance_fraction(a, b, COMPARE_POINTS);
            if matrix[i][j].is_none() && i < j {
                warnings.push(format!("'{la}' and '{lb}' have disjoint cost ranges"));
            }
        }
    }
    let lo = runs.iter().flat_map(|(_, f)| f.iter().map(|r| r.mflops)).min_by(f64::total_cmp).expect("non-empty");
    let hi = runs.iter().flat_map(|(_, f)| f.iter().map(|r| r.mflops)).max_by(f64::total_cmp).expect("non-empty");
    let aligned = budget_grid(lo, hi, COMPARE_POINTS)
        .into_iter()
        .map(|b| (b, runs.iter().map(|(_, f)| accuracy_at(f, b)).collect()))
        .collect();
    Ok(Comparison { labels: runs.iter().map(|(l, _)| l.clone()).collect(), matrix, warnings, aligned })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl Comparison {
    pub fn dominance_csv(&self) -> String {
        let mut out = format!("run,{}\n", self.labels.join(","));
        for (label, row) in self.labels.iter().zip(&self.matrix) {
            out.push_str(&format!("{label},{}\n", row.iter().map(|v| opt(*v)).collect::<Vec<_>>().join(",")));
        }
        out
    }

    pub fn aligned_csv(&self) -> String {
        let mut out = format!("mflops,{}\n", self.labels.join(","));
        for (b, accs) in &self.aligned {
            out.push_str(&format!("{b:.6},{}\n", accs.iter().map(|v| opt(*v)).collect::<Vec<_>>().join(",")));
        }
        out
    }
}

/// Step-curve plot of accuracy against MFLOPs as a standalone SVG.
pub fn frontier_svg(runs: &[(String, Vec<TableRow>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 56.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
    let all: Vec<&TableRow> = runs.iter().flat_map(|(_, f)| f.iter()).collect();
    let (x0, x1) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), r| (a.min(r.mflops), b.max(r.mflops)));
    let (y0, y1) = all.iter().fold((f64::MAX, f64::MIN), |(a, b), r| (a.min(r.top1), b.max(r.top1)));
    let (x1, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, if y1 > y0 { y1 } else { y0 + 0.01 });
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <text x=\"{cx}\" y=\"{ly}\" text-anchor=\"middle\">MFLOPs</text>\n\
         <text x=\"14\" y=\"{cy}\" transform=\"rotate(-90 14 {cy})\" text-anchor=\"middle\">top-1 accuracy</text>\n",
        b = H - M,
        r = W - M,
        cx = W / 2.0,
        ly = H - 16.0,
        cy = H / 2.0,
    );
    for (x, y, anchor) in [(x0, y0, "start"), (x1, y0, "end")] {
        svg.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"{anchor}\">{x:.2}</text>\n", px(x), py(y) + 16.0));
    }
    for y in [y0, y1] {
        svg.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.3}</text>\n", M - 4.0, py(y) + 4.0, y));
    }
    for (k, (label, rows)) in runs.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut points = Vec::new();
        for (i, r) in rows.iter().enumerate() {
            if i > 0 {
                points.push(format!("{:.1},{:.1}", px(r.mflops), py(rows[i - 1].top1)));
            }
            points.push(format!("{:.1},{:.1}", px(r.mflops), py(r.top1)));
        }
        svg.push_str(&format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n", points.join(" ")));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{}</text>\n",
            M + 8.0,
            M + 14.0 * (k as f64 + 1.0),
            label.replace('&', "&amp;").replace('<', "&lt;")
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mflops: f64, top1: f64) -> TableRow {
        TableRow { width: WidthMultiplier::FULL, resolution: 32, mflops, top1 }
    }

    fn sample_config() -> &'static str {
        r#"
name = "smoke"
mode = "mutualnet"
spec = "preset:desk_mobilenet"
seed = 1
output_dir = "runs/smoke"
validation_size = 20

[dataset]
kind = "synthetic"
classes = 4
train = 100
test = 20

[schedule]
epochs = 1
batch_size = 8
learning_rate = 0.05
"#
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = RunConfig::from_toml_str(sample_config()).unwrap();
        assert_eq!(cfg.calibration_samples, 2000);
        assert_eq!(cfg.width_step, 0.05);
        let spec = cfg.resolve_spec(Some(4)).unwrap();
        let (w, r) = cfg.table_grid(&spec).unwrap();
        assert_eq!(w.len() * r.len(), 64);
        let back = RunConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn schema_violations_are_config_errors() {
        let bad = sample_config().replace("mode = \"mutualnet\"", "mode = \"sandwich\"");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = sample_config().replace("batch_size = 8", "batch_size = 1");
        assert!(matches!(RunConfig::from_toml_str(&bad), Err(Error::Config(_))));
        let bad = sample_config().replace("seed = 1", "seed = 1\nresolutions = [32, 30]");
        assert!(RunConfig::from_toml_str(&bad).unwrap_err().is_config_error());
        let bad = sample_config().replace("seed = 1", "seed = 1\nwidth_lower_bound = 1.0");
        assert!(RunConfig::from_toml_str(&bad).is_err());
    }

    #[test]
    fn self_comparison_is_a_tie() {
        let f = vec![row(1.0, 0.3), row(2.0, 0.5), row(4.0, 0.6)];
        assert_eq!(dominance_fraction(&f, &f, 50), Some(0.5));
        assert_eq!(mean_gap(&f, &f, 0.0, 0.25, 10), Some(0.0));
    }

    #[test]
    fn dominance_matrix_is_antisymmetric() {
        let runs = vec![
            ("a".to_string(), vec![row(1.0, 0.3), row(3.0, 0.6)]),
            ("b".to_string(), vec![row(1.5, 0.35), row(3.0, 0.55)]),
            ("c".to_string(), vec![row(1.0, 0.2), row(2.0, 0.5), row(4.0, 0.7)]),
        ];
        let c = compare(&runs).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let s = c.matrix[i][j].unwrap() + c.matrix[j][i].unwrap();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(c.dominance_csv().starts_with("run,a,b,c\n"));
    }

    #[test]
    fn disjoint_ranges_warn() {
        let runs = vec![("a".to_string(), vec![row(1.0, 0.3)]), ("b".to_string(), vec![row(5.0, 0.5)])];
        let c = compare(&runs).unwrap();
        assert_eq!(c.matrix[0][1], None);
        assert_eq!(c.warnings.len(), 1);
    }

    #[test]
    fn low_end_gap() {
        let a = vec![row(1.0, 0.40), row(2.0, 0.60), row(5.0, 0.70)];
        let b = vec![row(1.0, 0.30), row(2.0, 0.50), row(5.0, 0.70)];
        let gap = mean_gap(&a, &b, 0.0, 0.25, 5).unwrap();
        assert!((gap - 0.1).abs() < 1e-12);
    }

    #[test]
    fn matched_bound_spans_the_same_cost() {
        let spec = SlimmableModelSpec::desk_mobilenet(10);
        let w = matched_lower_bound(&spec, WidthMultiplier::new(0.25).unwrap(), 20, 32, 0.05).unwrap();
        assert!(w.value() < 0.25);
    }

    #[test]
    fn svg_mentions_every_run() {
        let runs = vec![("a".to_string(), vec![row(1.0, 0.3), row(2.0, 0.4)]), ("b<c".to_string(), vec![row(1.5, 0.35)])];
        let svg = frontier_svg(&runs);
        assert!(svg.starts_with("<svg") && svg.contains(">a<") && svg.contains("b&lt;c"));
    }
}
