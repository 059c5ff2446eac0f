use std::collections::BTreeSet;

use rand::seq::index;

use super::LabeledDataset;
use crate::error::{invalid, Result};
use crate::rng::{rng_for, stream as tag};

/// One client's staged data: `T` training tasks, the matching test shards
/// and their cumulative unions.
#[derive(Debug, Clone)]
pub struct TaskStream {
    pub client_id: usize,
    pub tasks: Vec<LabeledDataset>,
    pub tests: Vec<LabeledDataset>,
    /// Entry `t` is the union of the test shards of tasks `0..=t`.
    pub cumulative_tests: Vec<LabeledDataset>,
    /// Entry `t` is the union of the training label sets of tasks `0..=t`.
    pub seen_classes: Vec<BTreeSet<usize>>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

/// Stratified train/test split; every class keeps at least one training
/// sample.
fn stratified_split(
    ds: &LabeledDataset,
    test_fraction: f64,
    rng: &mut crate::rng::Rng,
) -> (LabeledDataset, LabeledDataset) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for members in ds.indices_by_class() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - 1);
        let mut is_test = vec![false; n];
        for j in index::sample(rng, n, n_test) {
            is_test[j] = true;
        }
        for (j, &i) in members.iter().enumerate() {
            if is_test[j] {
                test.push(i)
            } else {
                train.push(i)
            }
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    (ds.select(&train), ds.select(&test))
}

/// Deals `num_clients * tasks_per_client` partitions round-robin (client `m`
/// gets partitions `m, m + M, m + 2M, ...` as its tasks in order) and splits
/// each task into train and test shards.
pub fn build_task_streams(
    partitions: &[LabeledDataset],
    num_clients: usize,
    tasks_per_client: usize,
    test_fraction: f64,
    seed: u64,
) -> Result<Vec<TaskStream>> {
    if num_clients == 0 || tasks_per_client == 0 {
        return Err(invalid("need at least one client and one task"));
    }
    if partitions.len() != num_clients * tasks_per_client {
        return Err(invalid(format!(
            "expected {} partitions for {num_clients} clients x {tasks_per_client} tasks, got {}",
            num_clients * tasks_per_client,
            partitions.len()
        )));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(invalid(format!("test fraction must be in (0, 1), got {test_fraction}")));
    }
    let dim = partitions[0].dim();
    let class_count = partitions[0].class_count();

    Ok((0..num_clients)
        .map(|m| {
            let mut tasks = Vec::with_capacity(tasks_per_client);
            let mut tests = Vec::with_capacity(tasks_per_client);
            for t in 0..tasks_per_client {
                let p = t * num_clients + m;
                let mut rng = rng_for(seed, &[tag::SPLIT, p as u64]);
                let (train, test) = stratified_split(&partitions[p], test_fraction, &mut rng);
                tasks.push(train);
                tests.push(test);
            }
            let cumulative_tests = (0..tasks_per_client)
                .map(|t| LabeledDataset::concat(&tests[..=t], dim, class_count))
                .collect();
            let mut seen = BTreeSet::new();
            let seen_classes = tasks
                .iter()
                .map(|task| {
                    seen.extend(task.label_set());
                    seen.clone()
                })
                .collect();
            TaskStream {
                client_id: m,
                tasks,
                tests,
                cumulative_tests,
                seen_classes,
            }
        })
        .collect())
}

/// Pools every test shard and draws the same number of samples from each
/// present class (the smallest class's count), without replacement.
pub fn balanced_test_set(streams: &[TaskStream], seed: u64) -> LabeledDataset {
    let first = streams.iter().flat_map(|s| s.tests.iter()).next();
    let Some(first) = first else {
        return LabeledDataset::empty(1, 1);
    };
    let pooled = LabeledDataset::concat(
        streams.iter().flat_map(|s| s.tests.iter()),
        first.dim(),
        first.class_count(),
    );
    let by_class = pooled.indices_by_class();
    let per_class = by_class.iter().map(Vec::len).filter(|&n| n > 0).min().unwrap_or(0);
    let mut rng = rng_for(seed, &[tag::BALANCED_TEST]);
    let mut chosen = Vec::new();
    for members in by_class.iter().filter(|m| !m.is_empty()) {
        let mut pick: Vec<usize> = index::sample(&mut rng, members.len(), per_class)
            .into_iter()
            .map(|j| members[j])
            .collect();
        pick.sort_unstable();
        chosen.extend(pick);
    }
    pooled.select(&chosen)
}
