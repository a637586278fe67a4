//! Joint width-resolution training.
//!
//! Each step samples a plan (full width at the highest resolution plus the
//! narrowest width and two random widths at random resolutions), trains the
//! full network on the labels and every other subnet towards the full
//! network's predictions, accumulates all gradients into the shared store and
//! applies a single optimizer update.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{augment, make_multires_batch, resize_bilinear};
use crate::data::{Batch, Dataset, ResolutionSet};
use crate::error::{Error, Result};
use crate::loss;
use crate::optim::{cosine_lr, Sgd, SgdConfig};
use crate::params::ParamStore;
use crate::spec::{SlimmableModelSpec, WidthMultiplier};
use crate::subnet::materialize_subnet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Sandwich widths, each subnet at its own random resolution.
    Mutualnet,
    /// Sandwich widths, all at the highest resolution.
    UsnetBaseline,
    /// Full network only, one random resolution per step.
    MultiscaleAugSingle,
    /// Sandwich widths sharing one random resolution per step.
    MultiscaleAugUsnet,
    /// One fixed configuration trained with cross-entropy.
    Independent,
}

impl TrainMode {
    pub const ALL: [TrainMode; 5] = [
        TrainMode::Mutualnet,
        TrainMode::UsnetBaseline,
        TrainMode::MultiscaleAugSingle,
        TrainMode::MultiscaleAugUsnet,
        TrainMode::Independent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Mutualnet => "mutualnet",
            TrainMode::UsnetBaseline => "usnet_baseline",
            TrainMode::MultiscaleAugSingle => "multiscale_aug_single",
            TrainMode::MultiscaleAugUsnet => "multiscale_aug_usnet",
            TrainMode::Independent => "independent",
        }
    }

    /// Whether the trained model is meant to run at every width.
    pub fn is_slimmable(self) -> bool {
        matches!(self, TrainMode::Mutualnet | TrainMode::UsnetBaseline | TrainMode::MultiscaleAugUsnet)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown training mode '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub width: WidthMultiplier,
    pub resolution: usize,
    pub teacher: bool,
}

/// Subnets trained in one step. The teacher, if any, comes first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStepPlan {
    pub subnets: Vec<PlanEntry>,
}

impl TrainStepPlan {
    pub fn teacher(&self) -> Option<&PlanEntry> {
        self.subnets.first().filter(|e| e.teacher)
    }

    pub fn students(&self) -> &[PlanEntry] {
        match self.teacher() {
            Some(_) => &self.subnets[1..],
            None => &self.subnets,
        }
    }

    pub fn resolutions(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.subnets.iter().map(|e| e.resolution).collect();
        r.sort_unstable_by(|a, b| b.cmp(a));
        r.dedup();
        r
    }
}

fn pick<R: Rng + ?Sized>(values: &[usize], rng: &mut R) -> usize {
    // Always consumes one draw, even for a single value.
    let u: f64 = rng.random();
    values[((u * values.len() as f64) as usize).min(values.len() - 1)]
}

fn random_widths<R: Rng + ?Sized>(lower: f64, rng: &mut R) -> Result<[WidthMultiplier; 2]> {
    let mut draw = || loop {
        let w = rng.random_range(lower..1.0);
        if w > lower {
            return WidthMultiplier::new(w);
        }
    };
    Ok([draw()?, draw()?])
}

fn check_lower(lower: WidthMultiplier) -> Result<f64> {
    let l = lower.value();
    if l >= 1.0 {
        return Err(Error::DegenerateRange(l));
    }
    Ok(l)
}

/// Sandwich plan: `[1.0 @ max, lower @ r, a1 @ r, a2 @ r]` with `a1, a2`
/// uniform in `(lower, 1)` and each `r` drawn uniformly with replacement.
pub fn sample_plan<R: Rng + ?Sized>(
    lower: WidthMultiplier,
    resolutions: &ResolutionSet,
    rng: &mut R,
) -> Result<TrainStepPlan> {
    let l = check_lower(lower)?;
    let [a1, a2] = random_widths(l, rng)?;
    let values = resolutions.values();
    let mut subnets = vec![PlanEntry { width: WidthMultiplier::FULL, resolution: resolutions.max(), teacher: true }];
    for width in [lower, a1, a2] {
        subnets.push(PlanEntry { width, resolution: pick(values, rng), teacher: false });
    }
    Ok(TrainStepPlan { subnets })
}

/// Per-mode plan. `fixed` is the configuration used by
/// [`TrainMode::Independent`].
pub fn plan_for_mode<R: Rng + ?Sized>(
    mode: TrainMode,
    lower: WidthMultiplier,
    resolutions: &ResolutionSet,
    fixed: (WidthMultiplier, usize),
    rng: &mut R,
) -> Result<TrainStepPlan> {
    match mode {
        TrainMode::Mutualnet => sample_plan(lower, resolutions, rng),
        TrainMode::UsnetBaseline => {
            let mut plan = sample_plan(lower, &ResolutionSet::single(resolutions.max())?, rng)?;
            plan.subnets.iter_mut().for_each(|e| e.resolution = resolutions.max());
            Ok(plan)
        }
        TrainMode::MultiscaleAugUsnet => {
            let l = check_lower(lower)?;
            let [a1, a2] = random_widths(l, rng)?;
            let r = pick(resolutions.values(), rng);
            let subnets = [(WidthMultiplier::FULL, true), (lower, false), (a1, false), (a2, false)]
                .into_iter()
                .map(|(width, teacher)| PlanEntry { width, resolution: r, teacher })
                .collect();
            Ok(TrainStepPlan { subnets })
        }
        TrainMode::MultiscaleAugSingle => {
            let r = pick(resolutions.values(), rng);
            Ok(TrainStepPlan { subnets: vec![PlanEntry { width: WidthMultiplier::FULL, resolution: r, teacher: true }] })
        }
        TrainMode::Independent => {
            Ok(TrainStepPlan { subnets: vec![PlanEntry { width: fixed.0, resolution: fixed.1, teacher: true }] })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub loss_full: f64,
    pub loss_sub: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn new(loss_full: f64, loss_sub: Vec<f64>) -> Self {
        let total = loss_sub.iter().fold(loss_full, |acc, l| acc + l);
        LossBreakdown { loss_full, loss_sub, total }
    }
}

fn batch_for<'b>(batches: &'b BTreeMap<usize, Batch>, resolution: usize) -> Result<&'b Batch> {
    batches
        .get(&resolution)
        .ok_or_else(|| Error::invalid(format!("no batch prepared at resolution {resolution}")))
}

fn check_finite(step: usize, entry: &PlanEntry, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            detail: format!("{what} of subnet ({}, {}) is {value}", entry.width, entry.resolution),
        })
    }
}

/// Runs the plan forward (and backward when `grads` is given), returning the
/// losses. Students target the teacher's distribution as a constant; a plan
/// without a teacher trains each entry with cross-entropy.
fn run_plan(
    spec: &SlimmableModelSpec,
    params: &ParamStore,
    plan: &TrainStepPlan,
    batches: &BTreeMap<usize, Batch>,
    mut grads: Option<&mut ParamStore>,
    step: usize,
) -> Result<(LossBreakdown, Tensor)> {
    let teacher = plan.teacher().ok_or_else(|| Error::invalid("plan has no full-width entry"))?;
    let batch = batch_for(batches, teacher.resolution)?;
    let view = materialize_subnet(spec, params, teacher.width)?;
    let (logits, cache) = view.forward_train(&batch.images)?;
    let (loss_full, grad) = loss::cross_entropy(&logits, &batch.labels)?;
    check_finite(step, teacher, "cross-entropy", loss_full)?;
    if let Some(g) = grads.as_deref_mut() {
        view.backward(cache, &grad, g)?;
    }
    let target = loss::probabilities(&logits);

    let mut loss_sub = Vec::with_capacity(plan.students().len());
    for entry in plan.students() {
        let batch = batch_for(batches, entry.resolution)?;
        let view = materialize_subnet(spec, params, entry.width)?;
        let (student, cache) = view.forward_train(&batch.images)?;
        let (kl, grad) = loss::kl_divergence(&target, &student)?;
        check_finite(step, entry, "KL divergence", kl)?;
        if let Some(g) = grads.as_deref_mut() {
            view.backward(cache, &grad, g)?;
        }
        loss_sub.push(kl);
    }
    Ok((LossBreakdown::new(loss_full, loss_sub), logits))
}

/// Loss values of one plan on prepared per-resolution batches.
pub fn compute_losses(
    spec: &SlimmableModelSpec,
    params: &ParamStore,
    plan: &TrainStepPlan,
    batches: &BTreeMap<usize, Batch>,
) -> Result<LossBreakdown> {
    run_plan(spec, params, plan, batches, None, 0).map(|(l, _)| l)
}

/// Sum of all subnet gradients of one plan, accumulated into a fresh store.
pub fn accumulate_gradients(
    spec: &SlimmableModelSpec,
    params: &ParamStore,
    plan: &TrainStepPlan,
    batches: &BTreeMap<usize, Batch>,
) -> Result<(LossBreakdown, ParamStore)> {
    let mut grads = params.zeros_like();
    let (losses, _) = run_plan(spec, params, plan, batches, Some(&mut grads), 0)?;
    Ok((losses, grads))
}

/// One optimizer update from the accumulated gradients of the whole plan.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    spec: &SlimmableModelSpec,
    params: &mut ParamStore,
    plan: &TrainStepPlan,
    batches: &BTreeMap<usize, Batch>,
    optimizer: &mut Sgd,
    lr: f64,
    step: usize,
) -> Result<(LossBreakdown, usize)> {
    let mut grads = params.zeros_like();
    let (losses, teacher_logits) = run_plan(spec, params, plan, batches, Some(&mut grads), step)?;
    if !grads.all_finite() {
        return Err(Error::NonFiniteLoss { step, detail: "gradient contains non-finite values".into() });
    }
    optimizer.step(params, &grads, lr)?;
    let teacher = plan.teacher().expect("checked by run_plan");
    let correct = loss::count_correct(&teacher_logits, &batch_for(batches, teacher.resolution)?.labels);
    Ok((losses, correct))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub sgd: SgdConfig,
    /// Zero-padding for random crops.
    #[serde(default = "default_crop_pad")]
    pub crop_pad: usize,
    /// Stop after this many steps (smoke runs).
    #[serde(default)]
    pub max_steps: Option<usize>,
}

fn default_crop_pad() -> usize {
    4
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if !(self.sgd.learning_rate.is_finite() && self.sgd.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss_full: f64,
    pub loss_total: f64,
    /// Accuracy of the full-width network on its (augmented) training batches.
    pub train_top1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// Augmented crop at the dataset's native size, brought to `base` and then
/// downsampled to every resolution the plan needs.
pub fn prepare_batches<R: Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    base: usize,
    plan: &TrainStepPlan,
    crop_pad: usize,
    rng: &mut R,
) -> Result<BTreeMap<usize, Batch>> {
    let clean = dataset.batch(indices)?;
    let mut crop = augment(&clean, crop_pad, rng);
    if crop.resolution() != base {
        crop.images = resize_bilinear(&crop.images, base, base)?;
    }
    make_multires_batch(&crop, &plan.resolutions())
}

/// Trains from a seeded initialization. All randomness (initialization,
/// shuffling, plans, augmentation) derives from `seed`.
pub fn run_training(
    mode: TrainMode,
    spec: &SlimmableModelSpec,
    dataset: &Dataset,
    schedule: &TrainSchedule,
    fixed_width: WidthMultiplier,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if dataset.num_classes != spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            dataset.num_classes, spec.num_classes
        )));
    }
    if dataset.len() < schedule.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} training samples for batch size {}",
            dataset.len(),
            schedule.batch_size
        )));
    }
    let base = spec.resolutions.max();
    let mut params = ParamStore::init(spec, seed);
    let mut optimizer = Sgd::new(schedule.sgd, &params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_7A1F);
    let steps_per_epoch = dataset.len() / schedule.batch_size;
    let total_steps = schedule.max_steps.map_or(steps_per_epoch * schedule.epochs, |m| m.min(steps_per_epoch * schedule.epochs));

    let mut step = 0;
    let mut history = Vec::with_capacity(schedule.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for epoch in 0..schedule.epochs {
        if step >= total_steps {
            break;
        }
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut sum_full, mut sum_total, mut correct, mut seen, mut steps) = (0.0, 0.0, 0usize, 0usize, 0usize);
        let mut lr = 0.0;
        for chunk in order.chunks_exact(schedule.batch_size) {
            if step >= total_steps {
                break;
            }
            lr = cosine_lr(schedule.sgd.learning_rate, step, total_steps);
            let plan = plan_for_mode(mode, spec.width_lower_bound, &spec.resolutions, (fixed_width, base), &mut rng)?;
            let batches = prepare_batches(dataset, chunk, base, &plan, schedule.crop_pad, &mut rng)?;
            let (losses, ok) = train_step(spec, &mut params, &plan, &batches, &mut optimizer, lr, step)?;
            sum_full += losses.loss_full;
            sum_total += losses.total;
            correct += ok;
            seen += chunk.len();
            steps += 1;
            step += 1;
        }
        let metrics = EpochMetrics {
            epoch,
            steps,
            lr,
            loss_full: sum_full / steps.max(1) as f64,
            loss_total: sum_total / steps.max(1) as f64,
            train_top1: correct as f64 / seen.max(1) as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&metrics);
        history.push(metrics);
    }
    Ok(TrainOutcome { checkpoint: Checkpoint::new(spec.clone(), params)?, history })
}
