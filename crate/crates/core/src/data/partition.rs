//! Non-iid partitioners: label-sorted sharding and per-class Dirichlet
//! allocation.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use super::LabeledDataset;
use crate::error::{invalid, Result};
use crate::rng::{rng_for, stream as tag};

/// Sorts samples by label, cuts them into `num_partitions * s` contiguous
/// equal-size shards and hands each partition `s` shards picked by a seeded
/// permutation. Samples that don't fill a whole shard are dropped from the
/// tail of the sorted order.
pub fn partition_sharding(
    dataset: &LabeledDataset,
    num_partitions: usize,
    s: usize,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    if num_partitions == 0 || s == 0 {
        return Err(invalid("sharding needs num_partitions >= 1 and s >= 1"));
    }
    let num_shards = num_partitions * s;
    let shard_size = dataset.len() / num_shards;
    if shard_size == 0 {
        return Err(invalid(format!(
            "{} samples cannot fill {num_shards} shards",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| dataset.labels()[i]);

    let mut shard_ids: Vec<usize> = (0..num_shards).collect();
    shard_ids.shuffle(&mut rng_for(seed, &[tag::SHARDING]));

    Ok(shard_ids
        .chunks_exact(s)
        .map(|chunk| {
            let mut mine = chunk.to_vec();
            mine.sort_unstable();
            let idx: Vec<usize> = mine
                .iter()
                .flat_map(|&sh| order[sh * shard_size..(sh + 1) * shard_size].iter().copied())
                .collect();
            dataset.select(&idx)
        })
        .collect())
}

/// How one class is split across partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAllocation {
    pub class: usize,
    /// Dirichlet draw over partitions, before rounding.
    pub proportions: Vec<f64>,
    /// Largest-remainder apportionment of the class's samples.
    pub counts: Vec<usize>,
}

fn dirichlet_draw(num_partitions: usize, beta: f64, rng: &mut crate::rng::Rng) -> Vec<f64> {
    let gamma = Gamma::new(beta, 1.0).expect("beta validated positive");
    let draws: Vec<f64> = (0..num_partitions).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|g| g / total).collect()
    } else {
        // every gamma draw underflowed; fall back to the (uniformly
        // random) largest one taking the whole class
        let winner = (rand::Rng::random::<u64>(rng) % num_partitions as u64) as usize;
        (0..num_partitions)
            .map(|p| if p == winner { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Splits `n` items according to `proportions` so the counts sum to `n`
/// exactly: floors first, then one extra item for the largest fractional
/// remainders (ties go to the lower partition index).
pub(crate) fn largest_remainder(n: usize, proportions: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = proportions.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut by_remainder: Vec<usize> = (0..proportions.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &p in by_remainder.iter().take(n.saturating_sub(assigned)) {
        counts[p] += 1;
    }
    counts
}

/// Per-class Dirichlet proportions and rounded counts, as used by
/// [`partition_dirichlet`].
pub fn dirichlet_plan(
    dataset: &LabeledDataset,
    num_partitions: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<ClassAllocation>> {
    if num_partitions == 0 {
        return Err(invalid("dirichlet partitioning needs num_partitions >= 1"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(invalid(format!("Dirichlet concentration must be positive, got {beta}")));
    }
    let hist = dataset.class_histogram();
    Ok(hist
        .iter()
        .enumerate()
        .map(|(class, &n)| {
            let mut rng = rng_for(seed, &[tag::DIRICHLET, class as u64]);
            let proportions = dirichlet_draw(num_partitions, beta, &mut rng);
            let counts = largest_remainder(n, &proportions);
            ClassAllocation {
                class,
                proportions,
                counts,
            }
        })
        .collect())
}

/// Dirichlet label-skew partitioning. Each class's samples are shuffled and
/// dealt out contiguously according to its allocation; partitions may end
/// up empty.
pub fn partition_dirichlet(
    dataset: &LabeledDataset,
    num_partitions: usize,
    beta: f64,
    seed: u64,
) -> Result<Vec<LabeledDataset>> {
    let plan = dirichlet_plan(dataset, num_partitions, beta, seed)?;
    let mut members = vec![Vec::new(); num_partitions];
    for (alloc, mut idx) in plan.iter().zip(dataset.indices_by_class()) {
        idx.shuffle(&mut rng_for(seed, &[tag::DIRICHLET, alloc.class as u64, 1]));
        let mut start = 0;
        for (p, &c) in alloc.counts.iter().enumerate() {
            members[p].extend_from_slice(&idx[start..start + c]);
            start += c;
        }
    }
    Ok(members
        .into_iter()
        .map(|mut m| {
            m.sort_unstable();
            dataset.select(&m)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(classes: usize, per: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..classes).flat_map(|k| std::iter::repeat_n(k, per)).collect();
        let features = (0..labels.len()).map(|i| i as f64).collect();
        LabeledDataset::new(features, labels, 1, classes).unwrap()
    }

    #[test]
    fn sharding_four_classes() {
        let ds = balanced(4, 50);
        let parts = partition_sharding(&ds, 4, 2, 11).unwrap();
        assert_eq!(parts.len(), 4);
        for p in &parts {
            assert_eq!(p.len(), 50);
            assert!(p.label_set().len() <= 2);
        }
    }

    #[test]
    fn sharding_single_partition_is_sorted_whole() {
        let labels = vec![2, 0, 1, 0, 2, 1];
        let ds = LabeledDataset::new((0..6).map(f64::from).collect(), labels, 1, 3).unwrap();
        let parts = partition_sharding(&ds, 1, 6, 5).unwrap();
        assert_eq!(parts[0].labels(), &[0, 0, 1, 1, 2, 2]);
        assert_eq!(parts[0].features(), &[1.0, 3.0, 2.0, 5.0, 0.0, 4.0]);
    }

    #[test]
    fn sharding_deterministic_and_drops_tail() {
        let ds = balanced(3, 7);
        let a = partition_sharding(&ds, 2, 2, 3).unwrap();
        assert_eq!(a, partition_sharding(&ds, 2, 2, 3).unwrap());
        // 21 samples, 4 shards of 5, last sorted sample dropped
        let total: usize = a.iter().map(LabeledDataset::len).sum();
        assert_eq!(total, 20);
        assert!(a.iter().all(|p| !p.features().contains(&20.0)));
    }

    #[test]
    fn sharding_too_few_samples() {
        assert!(partition_sharding(&balanced(2, 2), 3, 2, 0).is_err());
    }

    #[test]
    fn largest_remainder_exact() {
        assert_eq!(largest_remainder(10, &[0.33, 0.33, 0.34]), vec![3, 3, 4]);
        assert_eq!(largest_remainder(2, &[0.5, 0.5, 0.0]), vec![1, 1, 0]);
        assert_eq!(largest_remainder(1, &[0.5, 0.5]), vec![1, 0]);
        assert_eq!(largest_remainder(0, &[0.2, 0.8]), vec![0, 0]);
    }

    #[test]
    fn dirichlet_conserves_and_sums() {
        let ds = balanced(5, 37);
        let plan = dirichlet_plan(&ds, 6, 0.3, 2).unwrap();
        for a in &plan {
            assert!((a.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(a.counts.iter().sum::<usize>(), 37);
        }
        let parts = partition_dirichlet(&ds, 6, 0.3, 2).unwrap();
        let mut all: Vec<f64> = parts.iter().flat_map(|p| p.features().to_vec()).collect();
        all.sort_by(f64::total_cmp);
        assert_eq!(all, ds.features());
    }

    #[test]
    fn dirichlet_rejects_bad_beta() {
        assert!(partition_dirichlet(&balanced(2, 3), 2, 0.0, 1).is_err());
    }
}
