//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slimnet::data::make_multires_batch;
use slimnet::loss;
use slimnet::params::ParamTensor;
use slimnet::planner::TableRow;
use slimnet::spec::{LayerKind, LayerSpec, SlimmableModelSpec, SubnetConfig, WidthMultiplier};
use slimnet::trainer::TrainStepPlan;
use slimnet::{materialize_subnet, Batch, NormMode, ParamStore, ResolutionSet, SubnetView, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small random sequential backbone: stem conv, one to three blocks of
/// plain, depthwise-separable or grouped convolutions, pooling, an optional
/// hidden fully-connected layer and the classifier.
pub fn random_spec(seed: u64) -> SlimmableModelSpec {
    let mut r = rng(seed);
    let divisor = [1usize, 2, 4][r.random_range(0..3)];
    let groups = if divisor >= 2 && r.random_bool(0.5) { 2 } else { 1 };
    let classes = r.random_range(2..=5);
    let mut stride_budget = 2usize;
    let mut stride = |r: &mut ChaCha8Rng| {
        if stride_budget > 0 && r.random_bool(0.35) {
            stride_budget -= 1;
            2
        } else {
            1
        }
    };
    let mut ch = divisor * r.random_range(2..=5);
    let k = [1usize, 3][r.random_range(0..2)];
    let mut layers = vec![LayerSpec::conv(3, ch, k, stride(&mut r)), LayerSpec::norm(ch), LayerSpec::relu(ch)];
    for _ in 0..r.random_range(1..=3) {
        let next = divisor * r.random_range(2..=6);
        match r.random_range(0..3) {
            0 => {
                let k = [1usize, 3][r.random_range(0..2)];
                layers.push(LayerSpec::conv(ch, next, k, stride(&mut r)));
            }
            1 => {
                layers.push(LayerSpec::depthwise(ch, 3, stride(&mut r)));
                layers.push(LayerSpec::norm(ch));
                layers.push(LayerSpec::relu(ch));
                layers.push(LayerSpec::conv(ch, next, 1, 1));
            }
            _ => {
                let k = [1usize, 3][r.random_range(0..2)];
                layers.push(LayerSpec::group_conv(ch, next, k, stride(&mut r), groups));
            }
        }
        layers.push(LayerSpec::norm(next));
        layers.push(LayerSpec::relu(next));
        ch = next;
    }
    layers.push(LayerSpec::global_pool(ch));
    if r.random_bool(0.5) {
        let hidden = divisor * r.random_range(2..=4);
        layers.push(LayerSpec::fc(ch, hidden));
        layers.push(LayerSpec::relu(hidden));
        ch = hidden;
    }
    layers.push(LayerSpec::fc(ch, classes));
    let total_stride = 1usize << (2 - stride_budget);
    let lower = (r.random_range(0.2..0.6f64) * 100.0).round() / 100.0;
    SlimmableModelSpec {
        name: format!("random-{seed}"),
        input_channels: 3,
        num_classes: classes,
        channel_divisor: divisor,
        width_lower_bound: WidthMultiplier::new(lower).unwrap(),
        resolutions: ResolutionSet::new(vec![3 * total_stride, 2 * total_stride]).unwrap(),
        layers,
    }
    .finalize()
    .unwrap()
}

pub fn random_input(n: usize, c: usize, side: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_vec([n, c, side, side], (0..n * c * side * side).map(|_| r.random_range(-1.5..1.5f32)).collect()).unwrap()
}

/// Random non-trivial parameters, so that normalization shifts and the
/// classifier are not at their initial values.
pub fn random_params(spec: &SlimmableModelSpec, seed: u64) -> ParamStore {
    let mut store = ParamStore::init(spec, seed);
    let mut r = rng(seed ^ 0xABCD);
    for (layer, tensors) in spec.layers.iter().zip(store.layers.iter_mut()) {
        if matches!(layer.kind, LayerKind::Normalization | LayerKind::FullyConnected) {
            for t in tensors.iter_mut() {
                t.data.iter_mut().for_each(|v| *v += r.random_range(-0.3..0.3f32));
            }
        }
    }
    store
}

pub fn random_width(spec: &SlimmableModelSpec, r: &mut ChaCha8Rng) -> WidthMultiplier {
    WidthMultiplier::new(r.random_range(spec.width_lower_bound.value()..=1.0)).unwrap()
}

/// A stand-alone network whose base channels are the sliced channels of
/// `view`, holding copies of the view's weight slices.
pub fn standalone_copy(view: &SubnetView<'_>) -> (SlimmableModelSpec, ParamStore) {
    let spec = view.spec();
    let layers = spec
        .layers
        .iter()
        .zip(&view.arch().layers)
        .map(|(l, s)| LayerSpec { in_channels: s.in_channels, out_channels: s.out_channels, groups: s.groups, ..l.clone() })
        .collect();
    let small = SlimmableModelSpec {
        name: format!("{}-copy", spec.name),
        width_lower_bound: WidthMultiplier::FULL,
        layers,
        ..spec.clone()
    }
    .finalize()
    .unwrap();
    let mut store = ParamStore::zeros(&small);
    for (i, tensors) in store.layers.iter_mut().enumerate() {
        for (t, data) in tensors.iter_mut().zip(view.sliced_params(i)) {
            assert_eq!(t.data.len(), data.len());
            t.data = data;
        }
    }
    (small, store)
}

/// Flat offsets of every parameter that a view of `width` reads.
pub fn used_offsets(spec: &SlimmableModelSpec, params: &ParamStore, width: WidthMultiplier) -> Vec<Vec<Vec<usize>>> {
    let view = materialize_subnet(spec, params, width).unwrap();
    (0..spec.layers.len())
        .map(|i| {
            view.param_dims(i)
                .iter()
                .zip(&params.layers[i])
                .map(|(d, t)| t.leading_offsets(d))
                .collect()
        })
        .collect()
}

/// MACs from the shapes actually flowing through the sliced network:
/// parameter dims of each layer times the spatial size of its output.
pub fn shape_walk_macs(spec: &SlimmableModelSpec, params: &ParamStore, config: SubnetConfig) -> u64 {
    let view = materialize_subnet(spec, params, config.width).unwrap();
    let x = Tensor::zeros([2, spec.input_channels, config.resolution, config.resolution]);
    let mut shapes = Vec::new();
    let logits = view.forward_observed(&x, NormMode::Batch, &mut |_, t| shapes.push(t.shape())).unwrap();
    shapes.push(logits.shape());
    let mut total = 0u64;
    for (i, layer) in spec.layers.iter().enumerate() {
        let out = shapes[i + 1];
        let hw = (out[2] * out[3]) as u64;
        let dims = view.param_dims(i);
        let weight: u64 = dims.first().map(|d| d.iter().product::<usize>() as u64).unwrap_or(0);
        total += match layer.kind {
            LayerKind::Convolution | LayerKind::GroupConvolution | LayerKind::DepthwiseConvolution => weight * hw,
            LayerKind::FullyConnected => weight,
            _ => 0,
        };
    }
    total
}

pub fn batches_for(plan: &TrainStepPlan, base: &Batch) -> BTreeMap<usize, Batch> {
    make_multires_batch(base, &plan.resolutions()).unwrap()
}

pub fn random_batch(spec: &SlimmableModelSpec, n: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let images = random_input(n, spec.input_channels, spec.resolutions.max(), seed);
    let labels = (0..n).map(|_| r.random_range(0..spec.num_classes)).collect();
    Batch::new(images, labels, spec.num_classes).unwrap()
}

/// Per-subnet gradients, each from its own backward pass into a fresh store
/// over a cloned weight store, summed in f64.
pub fn isolated_gradients(
    spec: &SlimmableModelSpec,
    params: &ParamStore,
    plan: &TrainStepPlan,
    batches: &BTreeMap<usize, Batch>,
) -> (Vec<Vec<Vec<f64>>>, ParamStore, Vec<ParamStore>) {
    let weights = params.clone();
    let teacher = plan.teacher().unwrap();
    let tb = &batches[&teacher.resolution];
    let view = materialize_subnet(spec, &weights, teacher.width).unwrap();
    let (logits, cache) = view.forward_train(&tb.images).unwrap();
    let (_, grad) = loss::cross_entropy(&logits, &tb.labels).unwrap();
    let mut teacher_grads = weights.zeros_like();
    view.backward(cache, &grad, &mut teacher_grads).unwrap();
    let target = loss::probabilities(&logits);

    let mut students = Vec::new();
    for entry in plan.students() {
        let b = &batches[&entry.resolution];
        let view = materialize_subnet(spec, &weights, entry.width).unwrap();
        let (out, cache) = view.forward_train(&b.images).unwrap();
        let (_, grad) = loss::kl_divergence(&target, &out).unwrap();
        let mut g = weights.zeros_like();
        view.backward(cache, &grad, &mut g).unwrap();
        students.push(g);
    }
    let sum = teacher_grads
        .layers
        .iter()
        .enumerate()
        .map(|(i, ts)| {
            ts.iter()
                .enumerate()
                .map(|(t, tensor)| {
                    (0..tensor.data.len())
                        .map(|k| {
                            tensor.data[k] as f64 + students.iter().map(|s| s.layers[i][t].data[k] as f64).sum::<f64>()
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    (sum, teacher_grads, students)
}

/// Largest per-tensor relative error `||a - b|| / ||b||`.
pub fn max_relative_error(actual: &ParamStore, expected: &[Vec<Vec<f64>>]) -> f64 {
    let mut worst = 0.0f64;
    for (ts, es) in actual.layers.iter().zip(expected) {
        for (t, e) in ts.iter().zip(es) {
            let diff: f64 = t.data.iter().zip(e).map(|(a, b)| (*a as f64 - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = e.iter().map(|b| b * b).sum::<f64>().sqrt();
            if norm > 0.0 {
                worst = worst.max(diff / norm);
            } else {
                worst = worst.max(diff);
            }
        }
    }
    worst
}

/// Exact mean and biased variance per channel by two passes over every
/// activation value, in f64.
pub fn two_pass_moments(xs: &[Tensor]) -> (Vec<f64>, Vec<f64>) {
    let c = xs[0].channels();
    let mut mean = vec![0.0f64; c];
    let mut count = 0usize;
    for x in xs {
        let plane = x.plane();
        for s in 0..x.batch() {
            for ch in 0..c {
                mean[ch] += x.sample(s)[ch * plane..(ch + 1) * plane].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        count += x.batch() * plane;
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0f64; c];
    for x in xs {
        let plane = x.plane();
        for s in 0..x.batch() {
            for ch in 0..c {
                var[ch] += x.sample(s)[ch * plane..(ch + 1) * plane].iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    (mean, var)
}

/// Argmax over feasible rows by scanning a fully sorted copy.
pub fn brute_force_select(rows: &[TableRow], budget: f64) -> Option<TableRow> {
    let mut feasible: Vec<TableRow> = rows.iter().copied().filter(|r| r.mflops <= budget).collect();
    feasible.sort_by(|a, b| {
        b.top1
            .total_cmp(&a.top1)
            .then(a.mflops.total_cmp(&b.mflops))
            .then(a.resolution.cmp(&b.resolution))
            .then(a.width.value().total_cmp(&b.width.value()))
    });
    feasible.first().copied()
}

/// Pairwise dominance filter.
pub fn brute_force_frontier(rows: &[TableRow]) -> Vec<TableRow> {
    let mut keep: Vec<TableRow> = rows
        .iter()
        .copied()
        .filter(|r| !rows.iter().any(|s| s.mflops <= r.mflops && s.top1 > r.top1))
        .collect();
    keep.sort_by(|a, b| {
        a.mflops
            .total_cmp(&b.mflops)
            .then(a.resolution.cmp(&b.resolution))
            .then(a.width.value().total_cmp(&b.width.value()))
    });
    keep
}

/// A table over a random grid with coarse accuracies so ties occur.
pub fn random_table(seed: u64) -> Vec<TableRow> {
    let mut r = rng(seed);
    let widths = r.random_range(1..=16);
    let resolutions = [224usize, 192, 160, 128];
    let nres = r.random_range(1..=4);
    let mut rows = Vec::new();
    for &res in &resolutions[..nres] {
        for k in 0..widths {
            let w = 1.0 - 0.05 * k as f64;
            let mflops = if r.random_bool(0.2) {
                (r.random_range(1..20) * 10) as f64
            } else {
                (w * w * (res * res) as f64 / 90.0 * 100.0).round() / 100.0
            };
            rows.push(TableRow {
                width: WidthMultiplier::new(w).unwrap(),
                resolution: res,
                mflops,
                top1: r.random_range(0..40) as f64 / 40.0,
            });
        }
    }
    rows
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f32) -> f32 {
    assert_eq!(a.shape(), b.shape());
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0f32, f32::max);
    assert!(worst <= tol, "max deviation {worst} > {tol}");
    worst
}

pub fn leading_of(values: Vec<f32>, dims: &[usize], sub: &[usize]) -> Vec<f32> {
    ParamTensor { dims: dims.to_vec(), data: values }.leading(sub)
}
