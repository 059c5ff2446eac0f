use std::collections::{BTreeMap, BTreeSet};

use super::{FederationConfig, RoundReport};
use crate::error::Result;
use crate::model::ModelParams;
use crate::prototypes::{
    aggregate_global, default_global_clusters, global_semantic, minority_classes, GlobalPrototypeSet,
    LocalPrototypeSet, Scope, SemanticPrototypeSet,
};
use crate::rng::{derive_seed, stream as tag};

#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ModelParams,
    pub prototypes: GlobalPrototypeSet,
    /// Global semantic prototypes; `assignment` maps class -> cluster.
    pub semantic: SemanticPrototypeSet,
    pub minority: BTreeSet<usize>,
    /// Per-class training samples over every (client, stage) reported so far.
    pub class_counts: BTreeMap<usize, usize>,
    task_counts: BTreeMap<(usize, usize), BTreeMap<usize, usize>>,
    pub round: usize,
    pub class_count: usize,
}

impl ServerState {
    pub fn new(params: ModelParams) -> Self {
        let class_count = params.shape().classes;
        Self {
            params,
            prototypes: GlobalPrototypeSet::default(),
            semantic: SemanticPrototypeSet::empty(Scope::Global),
            minority: BTreeSet::new(),
            class_counts: BTreeMap::new(),
            task_counts: BTreeMap::new(),
            round: 0,
            class_count,
        }
    }
}

/// Sample-weighted parameter average in canonical client order. The whole
/// model is averaged; with extractor-only scope clients just never pull the
/// averaged classifier.
fn average_params(reports: &[&RoundReport], into: &mut ModelParams) {
    let total: usize = reports.iter().map(|r| r.samples_total).sum();
    if total == 0 {
        return;
    }
    let mut acc = ModelParams::zeros(into.shape());
    for r in reports.iter().filter(|r| r.samples_total > 0) {
        let w = r.samples_total as f64 / total as f64;
        for (a, p) in acc.tensors_mut().into_iter().zip(r.params.tensors()) {
            a.iter_mut().zip(p).for_each(|(x, y)| *x += w * y);
        }
    }
    *into = acc;
}

/// Folds one round of reports into the server state. Reports are reduced in
/// ascending client-id order so the outcome does not depend on arrival order.
pub fn aggregate(server: &mut ServerState, reports: &[RoundReport], cfg: &FederationConfig) -> Result<()> {
    server.round += 1;
    if reports.is_empty() {
        return Ok(());
    }
    let mut sorted: Vec<&RoundReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.client_id, r.stage));

    average_params(&sorted, &mut server.params);

    for r in &sorted {
        server
            .task_counts
            .insert((r.client_id, r.stage), r.class_counts.clone());
    }
    server.class_counts.clear();
    for counts in server.task_counts.values() {
        for (&k, &n) in counts {
            *server.class_counts.entry(k).or_insert(0) += n;
        }
    }
    server.minority = minority_classes(&server.class_counts);

    let uploads: Vec<LocalPrototypeSet> = sorted.iter().filter_map(|r| r.prototypes.clone()).collect();
    if !uploads.is_empty() {
        server
            .prototypes
            .merge(aggregate_global(&uploads, cfg.strategy.prototype_weighting));
        let v = cfg
            .global_clusters
            .unwrap_or_else(|| default_global_clusters(server.class_count));
        let seed = derive_seed(cfg.seed, &[tag::GLOBAL_KMEANS, server.round as u64]);
        server.semantic = global_semantic(&server.prototypes, v, seed)?;
    }
    Ok(())
}
