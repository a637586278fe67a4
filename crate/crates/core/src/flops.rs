//! Analytic multiply-accumulate cost model.
//!
//! Convolutions cost `C1 * C2 * K * K * H * W / g` (output spatial size),
//! fully-connected layers `in * out`; normalization, pooling, activation and
//! biases are free. Counts are MACs and are reported as "FLOPs"/MFLOPs.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::spec::{LayerKind, LayerSpec, SlimmableModelSpec, SubnetConfig, WidthMultiplier};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub config: SubnetConfig,
    pub per_layer: Vec<LayerCost>,
    pub total: u64,
}

impl CostReport {
    pub fn mflops(&self) -> f64 {
        self.total as f64 / 1e6
    }
}

/// MACs of one layer whose channel counts and groups are already sliced.
pub fn layer_cost(layer: &LayerSpec, out_h: usize, out_w: usize) -> Result<u64> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output spatial size must be positive"));
    }
    let c1 = layer.in_channels as u64;
    let c2 = layer.out_channels as u64;
    let k = layer.kernel as u64;
    let hw = (out_h * out_w) as u64;
    match layer.kind {
        LayerKind::Convolution | LayerKind::GroupConvolution | LayerKind::DepthwiseConvolution => {
            let g = layer.groups as u64;
            if c1 == 0 || c2 == 0 || k == 0 || g == 0 {
                return Err(Error::invalid("convolution dimensions must be positive"));
            }
            if c2 % g != 0 {
                return Err(Error::invalid(format!("groups {g} do not divide {c2} output channels")));
            }
            Ok(c1 * (c2 / g) * k * k * hw)
        }
        LayerKind::FullyConnected => {
            if c1 == 0 || c2 == 0 {
                return Err(Error::invalid("fully-connected dimensions must be positive"));
            }
            Ok(c1 * c2)
        }
        LayerKind::Normalization | LayerKind::Pooling | LayerKind::Activation => Ok(0),
    }
}

/// Walks the sliced network at `config`, propagating spatial size through
/// the strides (floor semantics) and summing layer costs.
pub fn network_cost(spec: &SlimmableModelSpec, config: SubnetConfig) -> Result<CostReport> {
    spec.check_resolution(config.resolution)?;
    let arch = spec.slice(config.width)?;
    let mut side = config.resolution;
    let mut per_layer = Vec::with_capacity(spec.layers.len());
    for (i, (layer, sliced)) in spec.layers.iter().zip(&arch.layers).enumerate() {
        if layer.kind.is_conv() {
            let pad = layer.kernel / 2;
            side = (side + 2 * pad - layer.kernel) / layer.stride + 1;
        } else if layer.kind == LayerKind::Pooling {
            side = 1;
        }
        let at_width = LayerSpec {
            in_channels: sliced.in_channels,
            out_channels: sliced.out_channels,
            groups: sliced.groups,
            ..layer.clone()
        };
        per_layer.push(LayerCost { layer: i, macs: layer_cost(&at_width, side, side)? });
    }
    let total = per_layer.iter().map(|c| c.macs).sum();
    Ok(CostReport { config, per_layer, total })
}

pub fn mflops(spec: &SlimmableModelSpec, config: SubnetConfig) -> Result<f64> {
    network_cost(spec, config).map(|r| r.mflops())
}

/// Width on a `step` grid whose cost at `resolution` is closest to
/// `target_macs` (ties go to the narrower width). Used to give a
/// fixed-resolution baseline the same cost span as a multi-resolution model.
pub fn width_matching_cost(
    spec: &SlimmableModelSpec,
    resolution: usize,
    target_macs: u64,
    step: f64,
) -> Result<WidthMultiplier> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::invalid("width step must be in (0, 1]"));
    }
    let steps = (1.0 / step).round() as usize;
    let mut best: Option<(u64, WidthMultiplier)> = None;
    for k in 1..=steps {
        let w = WidthMultiplier::new((k as f64 * step).min(1.0))?;
        let cost = network_cost(spec, SubnetConfig { width: w, resolution })?.total;
        let gap = cost.abs_diff(target_macs);
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, w));
        }
    }
    Ok(best.expect("at least one width").1)
}
