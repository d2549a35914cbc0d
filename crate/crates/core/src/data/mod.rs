//! Datasets, ingestion and non-IID partitioning.

mod ingest;
mod partition;

pub use ingest::{load_csv, load_idx, load_idx_images, load_idx_labels};
pub use partition::{
    default_shard_fractions, largest_remainder, partition, partition_by_assignment, partition_iid,
    partition_pathological, partition_practical, ClientProvenance, ClientSplit, FederatedSplit,
    ManifestClient, PartitionScheme, PartitionSpec, SplitManifest,
};

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Batch;
use crate::seed::SimRng;

/// A labelled sample matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
    feature_dim: usize,
}

impl Dataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
        feature_dim: usize,
    ) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::config(
                "dataset needs positive feature_dim and num_classes",
            ));
        }
        if inputs.len() != labels.len() * feature_dim {
            return Err(Error::config(format!(
                "dataset has {} values for {} rows of dim {feature_dim}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::config(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_classes,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            inputs,
            labels,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let mut inputs = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            inputs.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Batch::new(inputs, labels, self.feature_dim)
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> Result<Batch> {
        Batch::new(self.inputs.clone(), self.labels.clone(), self.feature_dim)
    }
}

/// Gaussian class clusters: one center per class drawn from
/// `N(0, class_center_scale²·I)`, samples drawn around it with
/// `N(0, noise_sigma²·I)`. Samples are emitted class by class.
pub fn synth_clusters(
    num_classes: usize,
    feature_dim: usize,
    samples_per_class: usize,
    class_center_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes == 0 || feature_dim == 0 || samples_per_class == 0 {
        return Err(Error::config("synthetic data needs positive sizes"));
    }
    let center_dist = Normal::new(0.0, class_center_scale)
        .map_err(|e| Error::config(format!("class_center_scale: {e}")))?;
    let noise =
        Normal::new(0.0, noise_sigma).map_err(|e| Error::config(format!("noise_sigma: {e}")))?;
    let mut rng = SimRng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            (0..feature_dim)
                .map(|_| center_dist.sample(&mut rng))
                .collect()
        })
        .collect();
    let mut inputs = Vec::with_capacity(num_classes * samples_per_class * feature_dim);
    let mut labels = Vec::with_capacity(num_classes * samples_per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            inputs.extend(center.iter().map(|&m| m + noise.sample(&mut rng)));
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, num_classes, feature_dim)
}

/// Splits a class-ordered dataset into train/test by taking the first
/// `train_per_class` samples of every class for training.
pub fn split_per_class(data: &Dataset, train_per_class: usize) -> (Dataset, Dataset) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for idx in data.class_indices() {
        let cut = train_per_class.min(idx.len());
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    (data.subset(&train), data.subset(&test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_is_deterministic_and_sized() {
        let a = synth_clusters(4, 8, 100, 1.0, 0.5, 9).unwrap();
        let b = synth_clusters(4, 8, 100, 1.0, 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 400);
        assert_eq!(a.class_counts(), vec![100; 4]);
        let c = synth_clusters(4, 8, 100, 1.0, 0.5, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_collapses_to_centers() {
        let d = synth_clusters(3, 5, 10, 2.0, 0.0, 1).unwrap();
        for idx in d.class_indices() {
            let first = d.row(idx[0]).to_vec();
            for &i in &idx {
                assert_eq!(d.row(i), first.as_slice());
            }
        }
        assert_ne!(d.row(0), d.row(10));
    }

    #[test]
    fn split_per_class_keeps_everything() {
        let d = synth_clusters(3, 2, 10, 1.0, 1.0, 2).unwrap();
        let (train, test) = split_per_class(&d, 7);
        assert_eq!(train.class_counts(), vec![7; 3]);
        assert_eq!(test.class_counts(), vec![3; 3]);
    }

    #[test]
    fn dataset_rejects_bad_shapes() {
        assert!(Dataset::new(vec![0.0; 3], vec![0, 1], 2, 2).is_err());
        assert!(Dataset::new(vec![0.0; 4], vec![0, 2], 2, 2).is_err());
    }
}
