//! T×C utterance feature matrices: the object that gets attacked, filtered,
//! and reconstructed.

use crate::tensor::{Tensor, TensorError};

/// Dense frames-by-channels matrix of standardized feature values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, channels: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        let t = Tensor::new(vec![frames, channels], data)?;
        Ok(FeatureMatrix {
            frames,
            channels,
            data: t.values().to_vec(),
        })
    }

    pub fn zeros(frames: usize, channels: usize) -> Result<Self, TensorError> {
        let t = Tensor::zeros(vec![frames, channels])?;
        Ok(FeatureMatrix {
            frames,
            channels,
            data: t.values().to_vec(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, t: usize, c: usize) -> f64 {
        self.data[t * self.channels + c]
    }

    pub fn set(&mut self, t: usize, c: usize, v: f64) {
        self.data[t * self.channels + c] = v;
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.frames, self.channels], self.data.clone())
            .expect("feature matrices hold valid tensors")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, TensorError> {
        let (frames, channels) = t.dims2()?;
        FeatureMatrix::new(frames, channels, t.values().to_vec())
    }

    /// Largest absolute per-cell difference.
    pub fn linf_distance(&self, other: &FeatureMatrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Euclidean (Frobenius) distance over all cells.
    pub fn l2_distance(&self, other: &FeatureMatrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    /// Mean absolute per-cell difference.
    pub fn l1_mean(&self, other: &FeatureMatrix) -> f64 {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }
}
