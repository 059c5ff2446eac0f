//! Datasets: synthesis, ingestion, long-tail subsampling, non-iid
//! partitioning and per-client staged task streams.

mod io;
mod partition;
mod stream;

pub use io::{load_csv, load_idx, write_csv};
pub use partition::{dirichlet_plan, partition_dirichlet, partition_sharding, ClassAllocation};
pub use stream::{balanced_test_set, build_task_streams, TaskStream};

use std::collections::BTreeSet;

use rand::seq::index;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{invalid, Error, Result};
use crate::rng::{rng_for, stream as tag};

/// Feature vectors (stored row-major in one buffer) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    dim: usize,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, dim: usize, class_count: usize) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: labels.len() * dim,
                actual: features.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(invalid(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Self {
            features,
            labels,
            dim,
            class_count,
        })
    }

    pub fn empty(dim: usize, class_count: usize) -> Self {
        Self {
            features: Vec::new(),
            labels: Vec::new(),
            dim,
            class_count,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features.chunks_exact(self.dim).zip(self.labels.iter().copied())
    }

    /// Samples per class, indexed by class id.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.labels.iter().copied().collect()
    }

    /// New dataset made of the given sample indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.sample(i));
            labels.push(self.labels[i]);
        }
        Self {
            features,
            labels,
            dim: self.dim,
            class_count: self.class_count,
        }
    }

    pub fn concat<'a>(parts: impl IntoIterator<Item = &'a LabeledDataset>, dim: usize, class_count: usize) -> Self {
        let mut out = Self::empty(dim, class_count);
        for p in parts {
            debug_assert_eq!(p.dim, dim);
            out.features.extend_from_slice(&p.features);
            out.labels.extend_from_slice(&p.labels);
        }
        out
    }

    /// Indices of each class, in sample order.
    pub(crate) fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &y) in self.labels.iter().enumerate() {
            by_class[y].push(i);
        }
        by_class
    }
}

/// Isotropic Gaussian blobs, one per class, with standard-normal means.
/// Samples are emitted class by class.
pub fn synth_blobs(
    num_classes: usize,
    d_in: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(invalid("synth_blobs needs at least 2 classes"));
    }
    if d_in == 0 || per_class == 0 {
        return Err(invalid("synth_blobs needs d_in >= 1 and per_class >= 1"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(invalid("synth_blobs spread must be positive"));
    }
    let mut rng = rng_for(seed, &[tag::SYNTH]);
    let means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..d_in).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut features = Vec::with_capacity(num_classes * per_class * d_in);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (k, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            for &m in mean {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(m + spread * noise);
            }
            labels.push(k);
        }
    }
    LabeledDataset::new(features, labels, d_in, num_classes)
}

/// Exponential long-tail target counts. `counts` is indexed by class id; the
/// result gives the number of samples each class keeps. Classes are ranked by
/// descending count (ties by class id) and rank `i` keeps
/// `round(n_max * gamma^(i / (K - 1)))`, never more than it has.
pub fn longtail_counts(counts: &[usize], gamma: f64) -> Result<Vec<usize>> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(invalid(format!("imbalance rate must be in (0, 1], got {gamma}")));
    }
    let mut ranked: Vec<usize> = (0..counts.len()).filter(|&k| counts[k] > 0).collect();
    ranked.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut keep = counts.to_vec();
    if ranked.len() < 2 {
        return Ok(keep);
    }
    let n_max = counts[ranked[0]] as f64;
    let steps = (ranked.len() - 1) as f64;
    for (rank, &k) in ranked.iter().enumerate() {
        let target = (n_max * gamma.powf(rank as f64 / steps)).round() as usize;
        keep[k] = target.clamp(1, counts[k]);
    }
    Ok(keep)
}

/// Subsamples classes without replacement to the exponential long-tail
/// profile. Surviving samples keep their original relative order.
pub fn apply_longtail(dataset: &LabeledDataset, gamma: f64, seed: u64) -> Result<LabeledDataset> {
    if dataset.is_empty() {
        return Err(invalid("apply_longtail needs a nonempty dataset"));
    }
    let keep = longtail_counts(&dataset.class_histogram(), gamma)?;
    let mut rng = rng_for(seed, &[tag::LONGTAIL]);
    let mut chosen = Vec::new();
    for (k, members) in dataset.indices_by_class().into_iter().enumerate() {
        if keep[k] == members.len() {
            chosen.extend(members);
        } else {
            chosen.extend(
                index::sample(&mut rng, members.len(), keep[k])
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
    }
    chosen.sort_unstable();
    Ok(dataset.select(&chosen))
}
