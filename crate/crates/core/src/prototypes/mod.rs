//! Class prototypes (mean features per class), their server-side
//! aggregation, semantic prototypes obtained by clustering prototypes, the
//! minority-class set and inter-task reference lookup.

mod kmeans;

pub use kmeans::{kmeans, kmeans_with, nearest_centroid, KMeansConfig, KMeansResult};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{invalid, Result};
use crate::model::ModelParams;

/// Class id -> prototype vector.
pub type ProtoMap = BTreeMap<usize, Vec<f64>>;

/// One client's prototypes for one stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalPrototypeSet {
    pub client_id: usize,
    pub stage: usize,
    pub prototypes: ProtoMap,
    pub counts: BTreeMap<usize, usize>,
}

impl LocalPrototypeSet {
    pub fn empty(client_id: usize, stage: usize) -> Self {
        Self {
            client_id,
            stage,
            prototypes: ProtoMap::new(),
            counts: BTreeMap::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GlobalPrototypeSet {
    pub prototypes: ProtoMap,
    /// Number of clients that contributed to each class's latest value.
    pub contributors: BTreeMap<usize, usize>,
}

impl GlobalPrototypeSet {
    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    /// Overwrites the classes present in `fresh`; other classes keep their
    /// previous prototype.
    pub fn merge(&mut self, fresh: GlobalPrototypeSet) {
        self.prototypes.extend(fresh.prototypes);
        self.contributors.extend(fresh.contributors);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Local,
    Global,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SemanticPrototypeSet {
    pub centroids: Vec<Vec<f64>>,
    /// Class id -> centroid index.
    pub assignment: BTreeMap<usize, usize>,
    pub scope: Scope,
    pub clamped: bool,
}

impl SemanticPrototypeSet {
    pub fn empty(scope: Scope) -> Self {
        Self {
            scope,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

/// How the server weights client prototypes of one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum PrototypeWeighting {
    /// Plain mean over reporting clients.
    #[default]
    Unweighted,
    /// Mean weighted by each client's sample count for the class.
    ByCount,
}

/// Arithmetic mean of a class's feature vectors.
pub fn compute_class_prototype(features: &[&[f64]]) -> Result<Vec<f64>> {
    let first = features
        .first()
        .ok_or_else(|| invalid("class prototype of an empty class"))?;
    let dim = first.len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(invalid("class prototype inputs differ in dimension"));
    }
    let mut sum = vec![0.0; dim];
    for f in features {
        sum.iter_mut().zip(*f).for_each(|(s, v)| *s += v);
    }
    let n = features.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Prototypes of every class present in `data`, under `params`'s extractor.
pub fn compute_local_prototypes(
    params: &ModelParams,
    data: &LabeledDataset,
    client_id: usize,
    stage: usize,
) -> Result<LocalPrototypeSet> {
    let mut by_class: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (x, y) in data.iter() {
        by_class.entry(y).or_default().push(params.features(x)?);
    }
    let mut set = LocalPrototypeSet::empty(client_id, stage);
    for (k, zs) in by_class {
        let views: Vec<&[f64]> = zs.iter().map(Vec::as_slice).collect();
        set.prototypes.insert(k, compute_class_prototype(&views)?);
        set.counts.insert(k, zs.len());
    }
    Ok(set)
}

fn canonical_order(reports: &[LocalPrototypeSet]) -> Vec<&LocalPrototypeSet> {
    let mut sorted: Vec<&LocalPrototypeSet> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        a.client_id.cmp(&b.client_id).then(a.stage.cmp(&b.stage)).then_with(|| {
            let flat = |r: &LocalPrototypeSet| -> Vec<(usize, u64)> {
                r.prototypes
                    .iter()
                    .flat_map(|(&k, v)| v.iter().map(move |x| (k, x.to_bits())))
                    .collect()
            };
            flat(a).cmp(&flat(b))
        })
    });
    sorted
}

/// Per-class mean of the reported prototypes over the clients that hold the
/// class. Reports are reduced in canonical (client id) order, so the result
/// does not depend on the input order.
pub fn aggregate_global(reports: &[LocalPrototypeSet], weighting: PrototypeWeighting) -> GlobalPrototypeSet {
    let mut sums: BTreeMap<usize, (Vec<f64>, f64, usize)> = BTreeMap::new();
    for r in canonical_order(reports) {
        for (&k, proto) in &r.prototypes {
            let w = match weighting {
                PrototypeWeighting::Unweighted => 1.0,
                PrototypeWeighting::ByCount => r.counts.get(&k).copied().unwrap_or(1) as f64,
            };
            let e = sums.entry(k).or_insert_with(|| (vec![0.0; proto.len()], 0.0, 0));
            e.0.iter_mut().zip(proto).for_each(|(s, v)| *s += w * v);
            e.1 += w;
            e.2 += 1;
        }
    }
    let mut out = GlobalPrototypeSet::default();
    for (k, (sum, wsum, clients)) in sums {
        out.prototypes.insert(k, sum.into_iter().map(|s| s / wsum).collect());
        out.contributors.insert(k, clients);
    }
    out
}

/// Default number of local semantic prototypes for `classes` local classes.
pub fn default_local_clusters(classes: usize) -> usize {
    2.max(classes.div_ceil(3))
}

/// Default number of global semantic prototypes for `classes` classes.
pub fn default_global_clusters(classes: usize) -> usize {
    2.max(classes.div_ceil(5))
}

fn cluster_map(protos: &ProtoMap, k: usize, seed: u64, scope: Scope) -> Result<SemanticPrototypeSet> {
    let classes: Vec<usize> = protos.keys().copied().collect();
    let points: Vec<Vec<f64>> = protos.values().cloned().collect();
    let r = kmeans_with(&points, k, seed, &KMeansConfig::default())?;
    Ok(SemanticPrototypeSet {
        assignment: classes.into_iter().zip(r.labels).collect(),
        centroids: r.centroids,
        scope,
        clamped: r.clamped,
    })
}

/// Clusters a client's prototypes into `min(u, #classes)` local semantic
/// prototypes.
pub fn local_semantic(protos: &ProtoMap, u: usize, seed: u64) -> Result<SemanticPrototypeSet> {
    if protos.is_empty() {
        return Err(invalid("local semantic prototypes need at least one class prototype"));
    }
    cluster_map(protos, u.min(protos.len()), seed, Scope::Local)
}

/// Clusters the global prototypes into `min(v, #classes)` global semantic
/// prototypes; `assignment` doubles as the class -> cluster map. An empty
/// global set yields an empty result.
pub fn global_semantic(global: &GlobalPrototypeSet, v: usize, seed: u64) -> Result<SemanticPrototypeSet> {
    if global.is_empty() {
        return Ok(SemanticPrototypeSet::empty(Scope::Global));
    }
    cluster_map(&global.prototypes, v.min(global.prototypes.len()), seed, Scope::Global)
}

/// The lower half (rounded down) of classes by sample count. Ties go to the
/// smaller class id first.
pub fn minority_classes(class_counts: &BTreeMap<usize, usize>) -> BTreeSet<usize> {
    let mut ranked: Vec<(usize, usize)> = class_counts.iter().map(|(&k, &n)| (n, k)).collect();
    ranked.sort_unstable();
    ranked.iter().take(ranked.len() / 2).map(|&(_, k)| k).collect()
}

/// Reference prototype for a sample of class `class_k`: its prototype from an
/// earlier stage if one exists, otherwise the local semantic centroid nearest
/// to `z` (ties to the lowest index). `None` when neither exists.
pub fn resolve_reference<'a>(
    class_k: usize,
    previous: &'a ProtoMap,
    local_centroids: &'a [Vec<f64>],
    z: &[f64],
) -> Option<&'a [f64]> {
    if let Some(p) = previous.get(&class_k) {
        return Some(p);
    }
    nearest_centroid(local_centroids, z).map(|i| local_centroids[i].as_slice())
}

/// JSON form of a prototype map, used for debugging dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSnapshot {
    pub scope: Scope,
    pub dim: usize,
    pub prototypes: BTreeMap<usize, Vec<f64>>,
}

impl PrototypeSnapshot {
    pub fn new(scope: Scope, prototypes: &ProtoMap) -> Self {
        let dim = prototypes.values().next().map_or(0, Vec::len);
        Self {
            scope,
            dim,
            prototypes: prototypes.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}
