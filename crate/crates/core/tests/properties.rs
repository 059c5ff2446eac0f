use std::collections::BTreeMap;

use proptest::prelude::*;

use fedmlp::data::{build_task_streams, longtail_counts, partition_sharding, LabeledDataset};
use fedmlp::metrics::accuracy;
use fedmlp::model::{forward, kl_divergence, smooth_l1, ModelParams, ModelShape};
use fedmlp::prototypes::{aggregate_global, minority_classes, LocalPrototypeSet, PrototypeWeighting};

fn dataset(labels: &[usize], classes: usize) -> LabeledDataset {
    let features = labels
        .iter()
        .enumerate()
        .flat_map(|(i, &y)| [i as f64, y as f64])
        .collect();
    LabeledDataset::new(features, labels.to_vec(), 2, classes).unwrap()
}

fn vector(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0..50.0f64, dim)
}

proptest! {
    #[test]
    fn losses_are_nonnegative(z in vector(6), c in vector(6), delta in 0.1..3.0f64, tau in 0.2..5.0f64) {
        prop_assert!(smooth_l1(&z, &c, delta).unwrap() >= 0.0);
        prop_assert!(kl_divergence(&z, &c, tau) >= -1e-12);
    }

    #[test]
    fn kl_shift_invariant(z in vector(5), c in vector(5), shift in -10.0..10.0f64) {
        let zs: Vec<f64> = z.iter().map(|v| v + shift).collect();
        let cs: Vec<f64> = c.iter().map(|v| v + shift).collect();
        let a = kl_divergence(&z, &c, 1.0);
        let b = kl_divergence(&zs, &cs, 1.0);
        prop_assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }

    #[test]
    fn probabilities_on_simplex(x in vector(4), seed in any::<u64>()) {
        let p = ModelParams::init(ModelShape { d_in: 4, hidden: 6, feature_dim: 3, classes: 5 }, seed);
        let f = forward(&p, &x).unwrap();
        prop_assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert_eq!(f.z.len(), 3);
    }

    #[test]
    fn accuracy_invariant_to_monotone_logit_transform(seed in any::<u64>(), scale in 0.1..10.0f64) {
        let shape = ModelShape { d_in: 2, hidden: 5, feature_dim: 3, classes: 4 };
        let p = ModelParams::init(shape, seed);
        // scaling the classifier by a positive factor is a monotone map of every logit
        let mut q = p.clone();
        for t in q.tensors_mut().into_iter().skip(4) {
            t.iter_mut().for_each(|v| *v *= scale);
        }
        let ds = dataset(&[0, 1, 2, 3, 0, 1, 2, 3, 1, 1], 4);
        prop_assert_eq!(accuracy(&p, &ds, None), accuracy(&q, &ds, None));
    }

    #[test]
    fn global_aggregation_order_free(
        reports in prop::collection::vec(prop::collection::btree_map(0..5usize, vector(3), 0..5), 1..6),
        perm_seed in any::<u64>(),
    ) {
        let sets: Vec<LocalPrototypeSet> = reports.into_iter().enumerate().map(|(c, protos)| {
            let counts = protos.keys().map(|&k| (k, 1)).collect();
            LocalPrototypeSet { client_id: c, stage: 1, prototypes: protos, counts }
        }).collect();
        let a = aggregate_global(&sets, PrototypeWeighting::Unweighted);
        let mut rev = sets.clone();
        rev.rotate_left((perm_seed % sets.len() as u64) as usize);
        rev.reverse();
        let b = aggregate_global(&rev, PrototypeWeighting::Unweighted);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn minority_is_lower_half(counts in prop::collection::btree_map(0..40usize, 1..1000usize, 0..20)) {
        let m = minority_classes(&counts);
        prop_assert_eq!(m.len(), counts.len() / 2);
        let worst_minority = m.iter().map(|k| counts[k]).max();
        let best_majority = counts.iter().filter(|(k, _)| !m.contains(k)).map(|(_, &n)| n).min();
        if let (Some(a), Some(b)) = (worst_minority, best_majority) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn longtail_profile_monotone(n_max in 1..3000usize, classes in 2..12usize, gamma in 0.01..=1.0f64) {
        let counts = longtail_counts(&vec![n_max; classes], gamma).unwrap();
        prop_assert_eq!(counts[0], n_max);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(counts.iter().all(|&c| c >= 1));
    }

    #[test]
    fn sharding_conserves(per_class in prop::collection::vec(10..60usize, 2..6), parts in 1..6usize, s in 1..3usize, seed in any::<u64>()) {
        let labels: Vec<usize> = per_class.iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect();
        let ds = dataset(&labels, per_class.len());
        let out = partition_sharding(&ds, parts, s, seed).unwrap();
        let shard = ds.len() / (parts * s);
        let mut seen = BTreeMap::new();
        for p in &out {
            prop_assert_eq!(p.len(), shard * s);
            for (x, y) in p.iter() {
                prop_assert_eq!(ds.labels()[x[0] as usize], y);
                *seen.entry(x[0] as usize).or_insert(0) += 1;
            }
        }
        prop_assert!(seen.values().all(|&c| c == 1));
        prop_assert_eq!(seen.len(), shard * s * parts);
    }

    #[test]
    fn task_streams_cumulative(clients in 1..4usize, tasks in 1..4usize, seed in any::<u64>()) {
        let labels: Vec<usize> = (0..240).map(|i| i % 4).collect();
        let ds = dataset(&labels, 4);
        let parts = partition_sharding(&ds, clients * tasks, 2, seed).unwrap();
        let streams = build_task_streams(&parts, clients, tasks, 0.25, seed).unwrap();
        for st in &streams {
            prop_assert_eq!(st.tasks.len(), tasks);
            for t in 0..tasks {
                let expected: usize = st.tests[..=t].iter().map(LabeledDataset::len).sum();
                prop_assert_eq!(st.cumulative_tests[t].len(), expected);
                prop_assert!(st.tests[t].label_set().is_subset(&st.tasks[t].label_set()));
                if t > 0 {
                    prop_assert!(st.seen_classes[t].is_superset(&st.seen_classes[t - 1]));
                }
            }
        }
    }
}
