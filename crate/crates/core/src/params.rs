//! Shared weight store.
//!
//! Every sub-network reads and writes the leading sub-tensor of these
//! full-width tensors. The same type doubles as the gradient accumulator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::spec::{LayerKind, LayerSpec, SlicedLayer, SlimmableModelSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamTensor {
    pub fn zeros(dims: Vec<usize>) -> Self {
        let len = dims.iter().product();
        ParamTensor { dims, data: vec![0.0; len] }
    }

    pub fn filled(dims: Vec<usize>, value: f32) -> Self {
        let len = dims.iter().product();
        ParamTensor { dims, data: vec![value; len] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row-major strides of the full tensor.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }

    /// Flat offsets of the leading sub-tensor with shape `sub`, in row-major order.
    pub fn leading_offsets(&self, sub: &[usize]) -> Vec<usize> {
        assert_eq!(sub.len(), self.dims.len(), "rank mismatch");
        assert!(sub.iter().zip(&self.dims).all(|(s, d)| s <= d), "sub-tensor exceeds tensor");
        let strides = self.strides();
        let mut offsets = vec![0usize];
        for (axis, &extent) in sub.iter().enumerate() {
            let mut next = Vec::with_capacity(offsets.len() * extent);
            for &base in &offsets {
                for i in 0..extent {
                    next.push(base + i * strides[axis]);
                }
            }
            offsets = next;
        }
        offsets
    }

    /// Copies out the leading sub-tensor with shape `sub`.
    pub fn leading(&self, sub: &[usize]) -> Vec<f32> {
        self.leading_offsets(sub).into_iter().map(|o| self.data[o]).collect()
    }
}

/// Full-width parameters, one (possibly empty) tensor list per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<Vec<ParamTensor>>,
}

/// Full-width parameter shapes of one layer.
pub fn full_param_dims(layer: &LayerSpec) -> Vec<Vec<usize>> {
    let k = layer.kernel;
    match layer.kind {
        LayerKind::Convolution | LayerKind::GroupConvolution => {
            vec![vec![layer.out_channels, layer.in_channels / layer.groups, k, k]]
        }
        LayerKind::DepthwiseConvolution => vec![vec![layer.out_channels, 1, k, k]],
        LayerKind::FullyConnected => {
            vec![vec![layer.out_channels, layer.in_channels], vec![layer.out_channels]]
        }
        LayerKind::Normalization => vec![vec![layer.out_channels], vec![layer.out_channels]],
        LayerKind::Pooling | LayerKind::Activation => Vec::new(),
    }
}

/// Parameter shapes a layer uses at a sliced width (leading sub-tensors of
/// [`full_param_dims`]).
pub fn sliced_param_dims(layer: &LayerSpec, sliced: &SlicedLayer) -> Vec<Vec<usize>> {
    let k = layer.kernel;
    match layer.kind {
        LayerKind::Convolution | LayerKind::GroupConvolution => {
            vec![vec![sliced.out_channels, sliced.in_channels / sliced.groups, k, k]]
        }
        LayerKind::DepthwiseConvolution => vec![vec![sliced.out_channels, 1, k, k]],
        LayerKind::FullyConnected => {
            vec![vec![sliced.out_channels, sliced.in_channels], vec![sliced.out_channels]]
        }
        LayerKind::Normalization => vec![vec![sliced.out_channels], vec![sliced.out_channels]],
        LayerKind::Pooling | LayerKind::Activation => Vec::new(),
    }
}

impl ParamStore {
    pub fn zeros(spec: &SlimmableModelSpec) -> Self {
        let layers = spec
            .layers
            .iter()
            .map(|l| full_param_dims(l).into_iter().map(ParamTensor::zeros).collect())
            .collect();
        ParamStore { layers }
    }

    /// He-normal (fan-in) convolutions, N(0, 0.01) classifier weights, zero
    /// biases, unit BN scale and zero shift.
    pub fn init(spec: &SlimmableModelSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::zeros(spec);
        for (layer, tensors) in spec.layers.iter().zip(store.layers.iter_mut()) {
            match layer.kind {
                LayerKind::Convolution | LayerKind::GroupConvolution | LayerKind::DepthwiseConvolution => {
                    let w = &mut tensors[0];
                    let fan_in = (w.dims[1] * w.dims[2] * w.dims[3]) as f32;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    w.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
                LayerKind::FullyConnected => {
                    let normal = Normal::new(0.0f32, 0.01).expect("finite std");
                    tensors[0].data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
                LayerKind::Normalization => {
                    tensors[0].data.iter_mut().for_each(|v| *v = 1.0);
                }
                LayerKind::Pooling | LayerKind::Activation => {}
            }
        }
        store
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|ts| ts.iter().map(|t| ParamTensor::zeros(t.dims.clone())).collect())
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &ParamTensor> {
        self.layers.iter().flatten()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut ParamTensor> {
        self.layers.iter_mut().flatten()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(ParamTensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &ParamStore) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    pub fn check_same_shape(&self, other: &ParamStore) -> Result<()> {
        let same = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.dims == y.dims));
        if same {
            Ok(())
        } else {
            Err(Error::invalid("parameter stores have different shapes"))
        }
    }

    pub fn check_matches_spec(&self, spec: &SlimmableModelSpec) -> Result<()> {
        self.check_same_shape(&ParamStore::zeros(spec))
            .map_err(|_| Error::Checkpoint("weight store does not match the model spec".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leading_offsets_pick_prefix_block() {
        let t = ParamTensor { dims: vec![3, 4], data: (0..12).map(|v| v as f32).collect() };
        assert_eq!(t.leading(&[2, 2]), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(t.leading(&[3, 4]), t.data);
    }

    #[test]
    fn init_is_seeded() {
        let spec = SlimmableModelSpec::desk_mobilenet(10);
        assert_eq!(ParamStore::init(&spec, 7), ParamStore::init(&spec, 7));
        assert_ne!(ParamStore::init(&spec, 7), ParamStore::init(&spec, 8));
    }
}
