use super::{DataError, Result};
use crate::tensor::Tensor;

/// In-memory labelled samples of identical shape.
#[derive(Debug, Clone)]
pub struct Dataset {
    samples: Vec<Tensor>,
    labels: Vec<usize>,
    way: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Vec<usize>, way: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(DataError::Invalid(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(first) = samples.first() {
            if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.shape() != first.shape()) {
                return Err(DataError::Invalid(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    s.shape(),
                    first.shape()
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= way) {
            return Err(DataError::Invalid(format!("label {bad} outside 0..{way}")));
        }
        Ok(Dataset { samples, labels, way })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn way(&self) -> usize {
        self.way
    }

    pub fn sample(&self, i: usize) -> &Tensor {
        &self.samples[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> Option<&[usize]> {
        self.samples.first().map(|s| s.shape())
    }

    /// Sample indices of each class, in dataset order.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.way];
        for (i, &l) in self.labels.iter().enumerate() {
            pools[l].push(i);
        }
        pools
    }

    /// Stacks the given samples into `[indices.len(), sample_shape...]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i]).collect();
        Ok(Tensor::stack(&items)?)
    }
}
