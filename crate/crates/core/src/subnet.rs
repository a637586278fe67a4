//! Width-sliced views over the shared weight store.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::norm::{self, BnCache, NormMode};
use crate::params::{full_param_dims, sliced_param_dims, ParamStore};
use crate::spec::{LayerKind, SliceArch, SlimmableModelSpec, WidthMultiplier};
use crate::tensor::Tensor;

/// A sub-network at one width. Holds no weights of its own: every layer
/// reads the leading slice of the shared store.
#[derive(Debug, Clone)]
pub struct SubnetView<'a> {
    spec: &'a SlimmableModelSpec,
    params: &'a ParamStore,
    arch: SliceArch,
}

/// Activations saved by [`SubnetView::forward_train`] for the backward pass.
#[derive(Debug)]
pub struct ForwardCache {
    inputs: Vec<Tensor>,
    bn: Vec<Option<BnCache>>,
}

impl ForwardCache {
    /// Shape of the tensor entering each layer.
    pub fn input_shapes(&self) -> Vec<[usize; 4]> {
        self.inputs.iter().map(Tensor::shape).collect()
    }
}

/// Materializes the sub-network of `spec` at `width` over `params`.
pub fn materialize_subnet<'a>(
    spec: &'a SlimmableModelSpec,
    params: &'a ParamStore,
    width: WidthMultiplier,
) -> Result<SubnetView<'a>> {
    if width.value() < spec.width_lower_bound.value() - 1e-9 {
        return Err(Error::ConstraintViolation(format!(
            "width {width} below the model's lower bound {}",
            spec.width_lower_bound
        )));
    }
    let shapes_match = params.layers.len() == spec.layers.len()
        && spec.layers.iter().zip(&params.layers).all(|(l, ts)| {
            let dims = full_param_dims(l);
            dims.len() == ts.len() && dims.iter().zip(ts).all(|(d, t)| *d == t.dims)
        });
    if !shapes_match {
        return Err(Error::invalid("weight store does not match the model spec"));
    }
    Ok(SubnetView { spec, params, arch: spec.slice(width)? })
}

impl<'a> SubnetView<'a> {
    pub fn width(&self) -> WidthMultiplier {
        self.arch.width
    }

    pub fn arch(&self) -> &SliceArch {
        &self.arch
    }

    pub fn spec(&self) -> &'a SlimmableModelSpec {
        self.spec
    }

    /// Shapes of the parameter slices layer `index` uses.
    pub fn param_dims(&self, index: usize) -> Vec<Vec<usize>> {
        sliced_param_dims(&self.spec.layers[index], &self.arch.layers[index])
    }

    /// Copies of the parameter slices layer `index` uses.
    pub fn sliced_params(&self, index: usize) -> Vec<Vec<f32>> {
        self.param_dims(index)
            .iter()
            .zip(&self.params.layers[index])
            .map(|(dims, t)| t.leading(dims))
            .collect()
    }

    /// Class logits, shape `(batch, num_classes, 1, 1)`.
    pub fn forward(&self, x: &Tensor, mode: NormMode<'_>) -> Result<Tensor> {
        self.run(x, mode, None, None)
    }

    /// Like [`forward`](Self::forward), handing the input of every layer to
    /// `observer` first.
    pub fn forward_observed(
        &self,
        x: &Tensor,
        mode: NormMode<'_>,
        observer: &mut dyn FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        self.run(x, mode, None, Some(observer))
    }

    /// Training-mode forward pass (batch statistics) that keeps what the
    /// backward pass needs.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        let mut cache = ForwardCache { inputs: Vec::new(), bn: Vec::new() };
        let logits = self.run(x, NormMode::Batch, Some(&mut cache), None)?;
        Ok((logits, cache))
    }

    fn geom(&self, index: usize) -> ConvGeom {
        let layer = &self.spec.layers[index];
        let sliced = &self.arch.layers[index];
        ConvGeom {
            cin: sliced.in_channels,
            cout: sliced.out_channels,
            groups: sliced.groups,
            kernel: layer.kernel,
            stride: layer.stride,
            pad: layer.padding(),
        }
    }

    fn run(
        &self,
        x: &Tensor,
        mode: NormMode<'_>,
        mut cache: Option<&mut ForwardCache>,
        mut observer: Option<&mut dyn FnMut(usize, &Tensor)>,
    ) -> Result<Tensor> {
        if x.channels() != self.spec.input_channels {
            return Err(Error::invalid(format!(
                "input has {} channels, model expects {}",
                x.channels(),
                self.spec.input_channels
            )));
        }
        if x.batch() == 0 || x.height() == 0 || x.width() == 0 {
            return Err(Error::invalid("empty input batch"));
        }
        if let NormMode::Calibrated(entry) = mode {
            if entry.config.width.key() != self.width().key() || entry.config.resolution != x.height() {
                return Err(Error::CalibrationRequired(format!(
                    "statistics are for {}, evaluating ({}, {})",
                    entry.config,
                    self.width(),
                    x.height()
                )));
            }
        }

        let mut act = x.clone();
        for (i, layer) in self.spec.layers.iter().enumerate() {
            if let Some(obs) = observer.as_deref_mut() {
                obs(i, &act);
            }
            let params = &self.params.layers[i];
            let sliced = self.arch.layers[i];
            if act.channels() != sliced.in_channels {
                return Err(Error::invalid(format!(
                    "layer {i}: got {} channels, expected {}",
                    act.channels(),
                    sliced.in_channels
                )));
            }
            let mut bn_cache = None;
            let next = match layer.kind {
                LayerKind::Convolution | LayerKind::GroupConvolution => {
                    let g = self.geom(i);
                    if act.height() + 2 * g.pad < g.kernel || act.width() + 2 * g.pad < g.kernel {
                        return Err(Error::invalid(format!("layer {i}: input too small for kernel")));
                    }
                    kernels::conv_forward(&act, &params[0], &g)
                }
                LayerKind::DepthwiseConvolution => {
                    kernels::depthwise_forward(&act, &params[0], layer.kernel, layer.stride, layer.padding())
                }
                LayerKind::FullyConnected => {
                    if act.plane() != 1 {
                        return Err(Error::invalid(format!("layer {i}: fully-connected input is not pooled")));
                    }
                    kernels::linear_forward(&act, &params[0], &params[1], sliced.in_channels, sliced.out_channels)
                }
                LayerKind::Normalization => {
                    let c = sliced.out_channels;
                    let gamma = &params[0].data[..c];
                    let beta = &params[1].data[..c];
                    match mode {
                        NormMode::Batch => {
                            let (y, bc) = norm::train_mode_forward(&act, gamma, beta)?;
                            bn_cache = Some(bc);
                            y
                        }
                        NormMode::PerSample => norm::per_sample_normalize(&act, gamma, beta),
                        NormMode::Calibrated(entry) => {
                            let stats = entry.layer(i).ok_or_else(|| {
                                Error::CalibrationRequired(format!("no statistics for layer {i} of {}", entry.config))
                            })?;
                            norm::eval_mode_normalize(&act, stats, gamma, beta)?
                        }
                    }
                }
                LayerKind::Pooling => kernels::global_pool_forward(&act),
                LayerKind::Activation => kernels::relu_forward(act.clone()),
            };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(act);
                c.bn.push(bn_cache);
            }
            act = next;
        }
        Ok(act)
    }

    /// Back-propagates `grad_logits` (dLoss/dlogits) and accumulates parameter
    /// gradients into the leading slices of `grads`.
    pub fn backward(&self, cache: ForwardCache, grad_logits: &Tensor, grads: &mut ParamStore) -> Result<()> {
        if cache.inputs.len() != self.spec.layers.len() {
            return Err(Error::invalid("forward cache does not belong to this network"));
        }
        if grads.layers.len() != self.params.layers.len() {
            return Err(Error::invalid("gradient store does not match the weight store"));
        }
        let mut dy = grad_logits.clone();
        let ForwardCache { inputs, bn } = cache;
        for (i, (x, bn_cache)) in inputs.iter().zip(bn).enumerate().rev() {
            let layer = &self.spec.layers[i];
            let sliced = self.arch.layers[i];
            let params = &self.params.layers[i];
            let need_dx = i > 0;
            let dx = match layer.kind {
                LayerKind::Convolution | LayerKind::GroupConvolution => {
                    kernels::conv_backward(x, &params[0], &dy, &self.geom(i), &mut grads.layers[i][0], need_dx)
                }
                LayerKind::DepthwiseConvolution => kernels::depthwise_backward(
                    x,
                    &params[0],
                    &dy,
                    layer.kernel,
                    layer.stride,
                    layer.padding(),
                    &mut grads.layers[i][0],
                    need_dx,
                ),
                LayerKind::FullyConnected => {
                    let (gw, gb) = grads.layers[i].split_at_mut(1);
                    kernels::linear_backward(
                        x,
                        &params[0],
                        &dy,
                        sliced.in_channels,
                        sliced.out_channels,
                        &mut gw[0],
                        &mut gb[0],
                        need_dx,
                    )
                }
                LayerKind::Normalization => {
                    let bc = bn_cache.ok_or_else(|| Error::invalid("normalization cache missing"))?;
                    let c = sliced.out_channels;
                    let (dx, dgamma, dbeta) = norm::train_mode_backward(x, &bc, &params[0].data[..c], &dy);
                    grads.layers[i][0].data[..c].iter_mut().zip(&dgamma).for_each(|(g, d)| *g += d);
                    grads.layers[i][1].data[..c].iter_mut().zip(&dbeta).for_each(|(g, d)| *g += d);
                    Some(dx)
                }
                LayerKind::Pooling => Some(kernels::global_pool_backward(x.shape(), &dy)),
                LayerKind::Activation => Some(kernels::relu_backward(x, dy)),
            };
            match dx {
                Some(d) => dy = d,
                None => break,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ResolutionSet;
    use crate::spec::LayerSpec;

    fn tiny_spec() -> SlimmableModelSpec {
        SlimmableModelSpec {
            name: "tiny".into(),
            input_channels: 3,
            num_classes: 5,
            channel_divisor: 4,
            width_lower_bound: WidthMultiplier::new(0.25).unwrap(),
            resolutions: ResolutionSet::new(vec![8, 6]).unwrap(),
            layers: vec![
                LayerSpec::conv(3, 16, 3, 2),
                LayerSpec::norm(16),
                LayerSpec::relu(16),
                LayerSpec::depthwise(16, 3, 1),
                LayerSpec::norm(16),
                LayerSpec::relu(16),
                LayerSpec::group_conv(16, 16, 1, 1, 2),
                LayerSpec::norm(16),
                LayerSpec::relu(16),
                LayerSpec::global_pool(16),
                LayerSpec::fc(16, 8),
                LayerSpec::relu(8),
                LayerSpec::fc(8, 5),
            ],
        }
        .finalize()
        .unwrap()
    }

    fn input(n: usize, r: usize, seed: u32) -> Tensor {
        let data = (0..n * 3 * r * r)
            .map(|i| ((((i as u32) ^ seed).wrapping_mul(2654435761) >> 9) % 997) as f32 / 498.5 - 1.0)
            .collect();
        Tensor::from_vec([n, 3, r, r], data).unwrap()
    }

    fn loss_of(view: &SubnetView<'_>, x: &Tensor, probe: &Tensor) -> f64 {
        let y = view.forward(x, NormMode::Batch).unwrap();
        y.data().iter().zip(probe.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn below_lower_bound_is_rejected() {
        let spec = tiny_spec();
        let params = ParamStore::init(&spec, 1);
        let err = materialize_subnet(&spec, &params, WidthMultiplier::new(0.2).unwrap()).unwrap_err();
        assert!(matches!(err, Error::ConstraintViolation(_)));
    }

    #[test]
    fn logits_shape_and_channel_check() {
        let spec = tiny_spec();
        let params = ParamStore::init(&spec, 1);
        let view = materialize_subnet(&spec, &params, WidthMultiplier::new(0.5).unwrap()).unwrap();
        let y = view.forward(&input(3, 8, 0), NormMode::Batch).unwrap();
        assert_eq!(y.shape(), [3, 5, 1, 1]);
        let bad = Tensor::zeros([2, 1, 8, 8]);
        assert!(matches!(view.forward(&bad, NormMode::Batch), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let spec = tiny_spec();
        let mut params = ParamStore::init(&spec, 3);
        // Non-trivial BN scale/shift and classifier weights.
        for (l, ts) in spec.layers.iter().zip(params.layers.iter_mut()) {
            if l.kind == LayerKind::Normalization {
                ts[1].data.iter_mut().enumerate().for_each(|(i, v)| *v = 0.3 + 0.05 * i as f32);
            }
            if l.kind == LayerKind::FullyConnected {
                ts[0].data.iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7 % 13) as f32 - 6.0) * 0.05);
            }
        }
        let x = input(4, 8, 5);
        let probe = Tensor::from_vec([4, 5, 1, 1], (0..20).map(|i| ((i * 5 % 7) as f32 - 3.0) / 3.0).collect()).unwrap();
        let width = WidthMultiplier::new(0.5).unwrap();
        let mut grads = params.zeros_like();
        {
            let view = materialize_subnet(&spec, &params, width).unwrap();
            let (_, cache) = view.forward_train(&x).unwrap();
            view.backward(cache, &probe, &mut grads).unwrap();
        }
        let eps = 1e-2f32;
        let mut checked = 0;
        for layer in 0..spec.layers.len() {
            let dims = {
                let view = materialize_subnet(&spec, &params, width).unwrap();
                view.param_dims(layer)
            };
            for (t, d) in dims.iter().enumerate() {
                let offsets = params.layers[layer][t].leading_offsets(d);
                for &o in offsets.iter().step_by(3).take(6) {
                    let orig = params.layers[layer][t].data[o];
                    params.layers[layer][t].data[o] = orig + eps;
                    let plus = loss_of(&materialize_subnet(&spec, &params, width).unwrap(), &x, &probe);
                    params.layers[layer][t].data[o] = orig - eps;
                    let minus = loss_of(&materialize_subnet(&spec, &params, width).unwrap(), &x, &probe);
                    params.layers[layer][t].data[o] = orig;
                    let fd = (plus - minus) / (2.0 * eps as f64);
                    let an = grads.layers[layer][t].data[o] as f64;
                    assert!(
                        (fd - an).abs() <= 2e-2 * (1.0 + fd.abs()),
                        "layer {layer} tensor {t} offset {o}: fd {fd} vs analytic {an}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 30);
    }
}
