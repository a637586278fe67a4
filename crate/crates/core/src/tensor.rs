//! Dense NCHW activations.

use crate::error::{Error, Result};

/// A dense `f32` tensor in NCHW layout. Fully-connected activations use
/// `h == w == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Tensor { shape, data: vec![0.0; shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    /// Elements per (sample, channel) plane.
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Row `n` of a `[N, C, 1, 1]` tensor.
    pub fn row(&self, n: usize) -> &[f32] {
        self.sample(n)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Gathers samples by index into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Tensor {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        Tensor { shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]], data }
    }
}
