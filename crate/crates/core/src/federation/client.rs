use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::{FederationConfig, ServerState, Strategy};
use crate::data::TaskStream;
use crate::error::Result;
use crate::model::{backward, proximal, sgd_step, Batch, LossBreakdown, ModelParams, ProtoContext, Velocity};
use crate::prototypes::{
    compute_local_prototypes, default_local_clusters, local_semantic, LocalPrototypeSet, ProtoMap, Scope,
    SemanticPrototypeSet,
};
use crate::rng::{derive_seed, rng_for, stream as tag};

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub params: ModelParams,
    pub velocity: Velocity,
    pub stream: TaskStream,
    /// Prototypes computed at the end of each stage's latest local update,
    /// keyed by stage (1-based).
    pub history: BTreeMap<usize, ProtoMap>,
    pub local_semantic: SemanticPrototypeSet,
}

/// What a client uploads after a local update.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub client_id: usize,
    pub stage: usize,
    pub params: ModelParams,
    /// Present only when the strategy shares prototypes with the server.
    pub prototypes: Option<LocalPrototypeSet>,
    pub class_counts: BTreeMap<usize, usize>,
    pub samples_total: usize,
    /// Batch-averaged loss terms over the update; `None` for an empty task.
    pub losses: Option<LossBreakdown>,
}

impl ClientState {
    pub fn new(stream: TaskStream, params: ModelParams) -> Self {
        Self {
            client_id: stream.client_id,
            velocity: Velocity::zeros_like(&params),
            params,
            stream,
            history: BTreeMap::new(),
            local_semantic: SemanticPrototypeSet::empty(Scope::Local),
        }
    }

    /// Latest prototype per class over stages `< stage`.
    pub fn previous_prototypes(&self, stage: usize) -> ProtoMap {
        let mut out = ProtoMap::new();
        for (_, protos) in self.history.range(..stage) {
            out.extend(protos.iter().map(|(k, v)| (*k, v.clone())));
        }
        out
    }

    /// Latest prototype per class over stages `<= stage`.
    pub fn memory(&self, stage: usize) -> ProtoMap {
        self.previous_prototypes(stage + 1)
    }

    fn sync(&mut self, global: &ModelParams, extractor_only: bool) {
        let take = if extractor_only {
            ModelParams::EXTRACTOR_TENSORS
        } else {
            6
        };
        for (dst, src) in self.params.tensors_mut().into_iter().zip(global.tensors()).take(take) {
            dst.copy_from_slice(src);
        }
    }
}

fn class_counts(labels: &[usize]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0) += 1;
    }
    counts
}

/// Pulls the server model, trains `rounds_local` epochs of mini-batch SGD on
/// the task of `stage` (1-based) and builds the upload.
pub fn local_update(
    client: &mut ClientState,
    server: &ServerState,
    stage: usize,
    round: usize,
    cfg: &FederationConfig,
) -> Result<RoundReport> {
    let strategy = &cfg.strategy;
    client.sync(&server.params, strategy.extractor_only());
    let anchor = client.params.clone();
    // fresh optimizer state for every local update
    client.velocity = Velocity::zeros_like(&client.params);
    let data = &client.stream.tasks[stage - 1];
    let counts = class_counts(data.labels());
    if data.is_empty() {
        return Ok(RoundReport {
            client_id: client.client_id,
            stage,
            params: client.params.clone(),
            prototypes: strategy
                .uploads_prototypes()
                .then(|| LocalPrototypeSet::empty(client.client_id, stage)),
            class_counts: counts,
            samples_total: 0,
            losses: None,
        });
    }

    let objective = strategy.objective();
    let previous = client.previous_prototypes(stage);
    let local_centroids = client.local_semantic.centroids.clone();
    let ctx = ProtoContext {
        global: Some(&server.prototypes.prototypes),
        semantic_centroids: &server.semantic.centroids,
        cluster_of_class: Some(&server.semantic.assignment),
        minority: Some(&server.minority),
        // no earlier task means no inter-task reference at all
        previous: Some(&previous),
        local_centroids: if stage > 1 { &local_centroids } else { &[] },
        reference_mode: strategy.reference_mode,
    };
    let mu = match strategy.strategy {
        Strategy::FedProx => strategy.fedprox_mu,
        _ => 0.0,
    };

    let mut rng = rng_for(cfg.seed, &[tag::CLIENT, client.client_id as u64, round as u64]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut sum = LossBreakdown::default();
    let mut batches = 0usize;
    let batch_size = cfg.hyper.batch_size.max(1);
    for _ in 0..cfg.rounds_local {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            let batch = Batch::from_indices(data, chunk);
            let (losses, mut grads) = backward(&batch, &client.params, &ctx, &cfg.hyper, &objective)?;
            if mu != 0.0 {
                let (_, prox) = proximal(&client.params, &anchor, mu);
                for (g, p) in grads.tensors_mut().into_iter().zip(prox.tensors()) {
                    g.iter_mut().zip(p).for_each(|(a, b)| *a += b);
                }
            }
            sgd_step(&mut client.params, &grads, &mut client.velocity, &cfg.hyper);
            sum.l_c += losses.l_c;
            sum.l_p += losses.l_p;
            sum.l_i += losses.l_i;
            sum.l_s += losses.l_s;
            sum.total += losses.total;
            sum.unmapped_minority += losses.unmapped_minority;
            batches += 1;
        }
    }
    let nb = batches.max(1) as f64;
    let mean_losses = LossBreakdown {
        l_c: sum.l_c / nb,
        l_p: sum.l_p / nb,
        l_i: sum.l_i / nb,
        l_s: sum.l_s / nb,
        total: sum.total / nb,
        unmapped_minority: sum.unmapped_minority,
    };

    let mut prototypes = None;
    if strategy.uploads_prototypes() || objective.intertask {
        let protos = compute_local_prototypes(&client.params, data, client.client_id, stage)?;
        client.history.insert(stage, protos.prototypes.clone());
        let memory = client.memory(stage);
        let u = cfg
            .local_clusters
            .unwrap_or_else(|| default_local_clusters(memory.len()));
        let seed = derive_seed(cfg.seed, &[tag::LOCAL_KMEANS, client.client_id as u64, round as u64]);
        client.local_semantic = local_semantic(&memory, u, seed)?;
        if strategy.uploads_prototypes() {
            prototypes = Some(protos);
        }
    }

    Ok(RoundReport {
        client_id: client.client_id,
        stage,
        params: client.params.clone(),
        prototypes,
        class_counts: counts,
        samples_total: data.len(),
        losses: Some(mean_losses),
    })
}
