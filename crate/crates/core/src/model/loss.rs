//! Local objective: cross entropy plus prototype, inter-task and semantic
//! regularizers, with exact reverse-mode gradients.

use std::collections::{BTreeMap, BTreeSet};

use super::{forward, log_softmax, softmax, Forward, ModelParams};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Hyperparams;
use crate::prototypes::{resolve_reference, ProtoMap};

/// Floor applied to the true-class probability inside `-ln p`.
pub const LOG_FLOOR: f64 = 1e-12;

/// A mini-batch of borrowed samples.
#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub xs: Vec<&'a [f64]>,
    pub ys: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn from_indices(ds: &'a LabeledDataset, indices: &[usize]) -> Self {
        Self {
            xs: indices.iter().map(|&i| ds.sample(i)).collect(),
            ys: indices.iter().map(|&i| ds.labels()[i]).collect(),
        }
    }

    pub fn whole(ds: &'a LabeledDataset) -> Self {
        Self {
            xs: ds.iter().map(|(x, _)| x).collect(),
            ys: ds.labels().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

/// Distance used by the prototype regularizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ProtoMetric {
    /// Smooth-L1 summed over dimensions.
    #[default]
    SmoothL1,
    /// Mean squared error over dimensions (FedProto's regularizer).
    SquaredL2,
}

/// How a class with no stored prototype picks its inter-task reference.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum ReferenceMode {
    /// Nearest local semantic centroid to each sample's own feature.
    #[default]
    PerSample,
    /// Nearest local semantic centroid to the class's mean feature in the batch.
    ClassMean,
}

/// Which regularizers are switched on. Cross entropy is always on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Objective {
    pub prototype: bool,
    pub intertask: bool,
    pub semantic: bool,
    pub metric: ProtoMetric,
}

impl Objective {
    pub fn cross_entropy_only() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            prototype: true,
            intertask: true,
            semantic: true,
            metric: ProtoMetric::SmoothL1,
        }
    }
}

/// Prototype knowledge visible to a client during one local update.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProtoContext<'a> {
    /// Global class prototypes.
    pub global: Option<&'a ProtoMap>,
    /// Global semantic centroids.
    pub semantic_centroids: &'a [Vec<f64>],
    pub cluster_of_class: Option<&'a BTreeMap<usize, usize>>,
    pub minority: Option<&'a BTreeSet<usize>>,
    /// The client's prototypes from earlier stages.
    pub previous: Option<&'a ProtoMap>,
    /// The client's local semantic centroids.
    pub local_centroids: &'a [Vec<f64>],
    pub reference_mode: ReferenceMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_c: f64,
    pub l_p: f64,
    pub l_i: f64,
    pub l_s: f64,
    pub total: f64,
    /// Minority samples whose class had no semantic cluster.
    pub unmapped_minority: usize,
}

fn check_dims(z: &[f64], c: &[f64]) -> Result<()> {
    if z.len() != c.len() {
        return Err(Error::DimensionMismatch {
            expected: z.len(),
            actual: c.len(),
        });
    }
    Ok(())
}

fn huber(x: f64, delta: f64) -> f64 {
    if x.abs() < delta {
        0.5 * x * x
    } else {
        delta * (x.abs() - 0.5 * delta)
    }
}

fn huber_grad(x: f64, delta: f64) -> f64 {
    if x.abs() < delta {
        x
    } else {
        delta * x.signum()
    }
}

/// Smooth-L1 distance summed over dimensions.
pub fn smooth_l1(z: &[f64], c: &[f64], delta: f64) -> Result<f64> {
    check_dims(z, c)?;
    Ok(z.iter().zip(c).map(|(a, b)| huber(a - b, delta)).sum())
}

fn distance(metric: ProtoMetric, z: &[f64], c: &[f64], delta: f64) -> f64 {
    match metric {
        ProtoMetric::SmoothL1 => z.iter().zip(c).map(|(a, b)| huber(a - b, delta)).sum(),
        ProtoMetric::SquaredL2 => z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / z.len() as f64,
    }
}

fn distance_grad(metric: ProtoMetric, z: &[f64], c: &[f64], delta: f64, scale: f64, out: &mut [f64]) {
    let d = z.len() as f64;
    for ((o, a), b) in out.iter_mut().zip(z).zip(c) {
        *o += scale
            * match metric {
                ProtoMetric::SmoothL1 => huber_grad(a - b, delta),
                ProtoMetric::SquaredL2 => 2.0 * (a - b) / d,
            };
    }
}

/// Mean of `-ln max(p[y], 1e-12)` over the batch.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let sum: f64 = probs.iter().zip(labels).map(|(p, &y)| -p[y].max(LOG_FLOOR).ln()).sum();
    sum / labels.len() as f64
}

/// `KL(softmax(z / tau) || softmax(c / tau))`.
pub fn kl_divergence(z: &[f64], c: &[f64], tau: f64) -> f64 {
    let zs: Vec<f64> = z.iter().map(|v| v / tau).collect();
    let cs: Vec<f64> = c.iter().map(|v| v / tau).collect();
    let lp = log_softmax(&zs);
    let lq = log_softmax(&cs);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum::<f64>().max(0.0)
}

fn kl_grad(z: &[f64], c: &[f64], tau: f64, scale: f64, out: &mut [f64]) {
    let zs: Vec<f64> = z.iter().map(|v| v / tau).collect();
    let cs: Vec<f64> = c.iter().map(|v| v / tau).collect();
    let lp = log_softmax(&zs);
    let lq = log_softmax(&cs);
    let p = softmax(&zs);
    let a: Vec<f64> = lp.iter().zip(&lq).map(|(x, y)| x - y).collect();
    let kl: f64 = p.iter().zip(&a).map(|(pi, ai)| pi * ai).sum();
    for ((o, pi), ai) in out.iter_mut().zip(&p).zip(&a) {
        *o += scale * pi * (ai - kl) / tau;
    }
}

/// Mean prototype distance over the samples whose class has a global
/// prototype; other samples are left out of the average.
pub fn loss_prototype(zs: &[Vec<f64>], ys: &[usize], global: &ProtoMap, metric: ProtoMetric, delta: f64) -> f64 {
    let (sum, n) = zs
        .iter()
        .zip(ys)
        .fold((0.0, 0usize), |(s, n), (z, y)| match global.get(y) {
            Some(g) => (s + distance(metric, z, g, delta), n + 1),
            None => (s, n),
        });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean Smooth-L1 distance of minority-class samples to their class's global
/// semantic centroid. Returns the loss and the number of minority samples
/// whose class has no cluster (they count in the average with zero loss).
pub fn loss_semantic(
    zs: &[Vec<f64>],
    ys: &[usize],
    centroids: &[Vec<f64>],
    cluster_of_class: &BTreeMap<usize, usize>,
    minority: &BTreeSet<usize>,
    delta: f64,
) -> (f64, usize) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut unmapped = 0;
    for (z, y) in zs.iter().zip(ys) {
        if !minority.contains(y) {
            continue;
        }
        n += 1;
        match cluster_of_class.get(y).and_then(|&v| centroids.get(v)) {
            Some(p) => sum += distance(ProtoMetric::SmoothL1, z, p, delta),
            None => unmapped += 1,
        }
    }
    (if n == 0 { 0.0 } else { sum / n as f64 }, unmapped)
}

/// Mean KL divergence over samples that have a reference; the rest are
/// skipped and left out of the average.
pub fn loss_intertask(zs: &[Vec<f64>], references: &[Option<Vec<f64>>], tau: f64) -> f64 {
    let (sum, n) = zs.iter().zip(references).fold((0.0, 0usize), |(s, n), (z, r)| match r {
        Some(c) => (s + kl_divergence(z, c, tau), n + 1),
        None => (s, n),
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Inter-task reference for every sample: the class's prototype from an
/// earlier stage, or else the nearest local semantic centroid.
pub fn resolve_references(zs: &[Vec<f64>], ys: &[usize], ctx: &ProtoContext<'_>) -> Vec<Option<Vec<f64>>> {
    let empty = ProtoMap::new();
    let previous = ctx.previous.unwrap_or(&empty);
    let class_means: BTreeMap<usize, Vec<f64>> = match ctx.reference_mode {
        ReferenceMode::PerSample => BTreeMap::new(),
        ReferenceMode::ClassMean => {
            let mut acc: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
            for (z, &y) in zs.iter().zip(ys) {
                let e = acc.entry(y).or_insert_with(|| (vec![0.0; z.len()], 0));
                e.0.iter_mut().zip(z).for_each(|(a, b)| *a += b);
                e.1 += 1;
            }
            acc.into_iter()
                .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
                .collect()
        }
    };
    zs.iter()
        .zip(ys)
        .map(|(z, y)| {
            let probe = class_means.get(y).unwrap_or(z);
            resolve_reference(*y, previous, ctx.local_centroids, probe).map(<[f64]>::to_vec)
        })
        .collect()
}

/// `(mu / 2) * ||params - anchor||^2` and its gradient.
pub fn proximal(params: &ModelParams, anchor: &ModelParams, mu: f64) -> (f64, ModelParams) {
    let mut grad = ModelParams::zeros(params.shape());
    let mut value = 0.0;
    for ((g, p), a) in grad
        .tensors_mut()
        .into_iter()
        .zip(params.tensors())
        .zip(anchor.tensors())
    {
        for ((gi, pi), ai) in g.iter_mut().zip(p).zip(a) {
            let d = pi - ai;
            value += d * d;
            *gi = mu * d;
        }
    }
    (0.5 * mu * value, grad)
}

struct Evaluation {
    losses: LossBreakdown,
    grads: Option<ModelParams>,
}

fn evaluate(
    batch: &Batch<'_>,
    params: &ModelParams,
    ctx: &ProtoContext<'_>,
    hyper: &Hyperparams,
    objective: &Objective,
    want_grads: bool,
) -> Result<Evaluation> {
    let n = batch.len();
    let passes: Vec<Forward> = batch.xs.iter().map(|x| forward(params, x)).collect::<Result<_>>()?;
    let zs: Vec<Vec<f64>> = passes.iter().map(|f| f.z.clone()).collect();
    let probs: Vec<Vec<f64>> = passes.iter().map(|f| f.probs.clone()).collect();
    let delta = hyper.smooth_l1_delta;
    let tau = hyper.kl_temperature;

    let mut losses = LossBreakdown {
        l_c: cross_entropy(&probs, &batch.ys),
        ..Default::default()
    };
    // per-sample gradient w.r.t. z coming from the regularizers
    let mut dz: Vec<Vec<f64>> = vec![vec![0.0; params.feature.outputs]; n];

    if objective.prototype {
        if let Some(global) = ctx.global {
            losses.l_p = loss_prototype(&zs, &batch.ys, global, objective.metric, delta);
            let count = batch.ys.iter().filter(|y| global.contains_key(y)).count();
            if want_grads && count > 0 {
                let scale = 1.0 / count as f64;
                for (i, y) in batch.ys.iter().enumerate() {
                    if let Some(g) = global.get(y) {
                        distance_grad(objective.metric, &zs[i], g, delta, scale, &mut dz[i]);
                    }
                }
            }
        }
    }

    if objective.intertask {
        let refs = resolve_references(&zs, &batch.ys, ctx);
        losses.l_i = loss_intertask(&zs, &refs, tau);
        let count = refs.iter().filter(|r| r.is_some()).count();
        if want_grads && count > 0 {
            let scale = 1.0 / count as f64;
            for (i, r) in refs.iter().enumerate() {
                if let Some(c) = r {
                    kl_grad(&zs[i], c, tau, scale, &mut dz[i]);
                }
            }
        }
    }

    if objective.semantic {
        if let (Some(clusters), Some(minority)) = (ctx.cluster_of_class, ctx.minority) {
            let centroids = ctx.semantic_centroids;
            let (l_s, unmapped) = loss_semantic(&zs, &batch.ys, centroids, clusters, minority, delta);
            losses.l_s = l_s;
            losses.unmapped_minority = unmapped;
            let count = batch.ys.iter().filter(|y| minority.contains(y)).count();
            if want_grads && count > 0 {
                let scale = hyper.alpha / count as f64;
                for (i, y) in batch.ys.iter().enumerate() {
                    if !minority.contains(y) {
                        continue;
                    }
                    if let Some(p) = clusters.get(y).and_then(|&v| centroids.get(v)) {
                        distance_grad(ProtoMetric::SmoothL1, &zs[i], p, delta, scale, &mut dz[i]);
                    }
                }
            }
        }
    }

    losses.total = losses.l_c + losses.l_p + losses.l_i + hyper.alpha * losses.l_s;
    if !want_grads {
        return Ok(Evaluation { losses, grads: None });
    }

    let mut grads = ModelParams::zeros(params.shape());
    if n == 0 {
        return Ok(Evaluation {
            losses,
            grads: Some(grads),
        });
    }
    let inv_n = 1.0 / n as f64;
    let (fd, hd) = (params.feature.outputs, params.hidden.outputs);
    let mut dlogits = vec![0.0; params.classifier.outputs];
    let mut dh = vec![0.0; hd];
    for (i, f) in passes.iter().enumerate() {
        let y = batch.ys[i];
        let floored = f.probs[y] < LOG_FLOOR;
        for (k, d) in dlogits.iter_mut().enumerate() {
            *d = if floored {
                0.0
            } else {
                (f.probs[k] - if k == y { 1.0 } else { 0.0 }) * inv_n
            };
        }
        // classifier
        let dzi = &mut dz[i];
        for (k, &dl) in dlogits.iter().enumerate() {
            grads.classifier.bias[k] += dl;
            let row = &params.classifier.weight[k * fd..(k + 1) * fd];
            let grow = &mut grads.classifier.weight[k * fd..(k + 1) * fd];
            for j in 0..fd {
                grow[j] += dl * f.z[j];
                dzi[j] += dl * row[j];
            }
        }
        // feature layer
        dh.iter_mut().for_each(|v| *v = 0.0);
        for (j, &dzj) in dzi.iter().enumerate() {
            grads.feature.bias[j] += dzj;
            let row = &params.feature.weight[j * hd..(j + 1) * hd];
            let grow = &mut grads.feature.weight[j * hd..(j + 1) * hd];
            for h in 0..hd {
                grow[h] += dzj * f.hidden[h];
                dh[h] += dzj * row[h];
            }
        }
        // hidden layer through the ReLU
        let x = batch.xs[i];
        let din = params.hidden.inputs;
        for (h, (&g, &pre)) in dh.iter().zip(&f.pre_hidden).enumerate() {
            if pre <= 0.0 {
                continue;
            }
            grads.hidden.bias[h] += g;
            let grow = &mut grads.hidden.weight[h * din..(h + 1) * din];
            for (gw, xv) in grow.iter_mut().zip(x) {
                *gw += g * xv;
            }
        }
    }
    Ok(Evaluation {
        losses,
        grads: Some(grads),
    })
}

/// `L_C + L_P + L_I + alpha * L_S` on one batch; disabled terms are 0.
pub fn total_loss(
    batch: &Batch<'_>,
    params: &ModelParams,
    ctx: &ProtoContext<'_>,
    hyper: &Hyperparams,
    objective: &Objective,
) -> Result<LossBreakdown> {
    Ok(evaluate(batch, params, ctx, hyper, objective, false)?.losses)
}

/// Loss breakdown and exact gradient of the total. Reference and semantic
/// targets are treated as constants.
pub fn backward(
    batch: &Batch<'_>,
    params: &ModelParams,
    ctx: &ProtoContext<'_>,
    hyper: &Hyperparams,
    objective: &Objective,
) -> Result<(LossBreakdown, ModelParams)> {
    let e = evaluate(batch, params, ctx, hyper, objective, true)?;
    Ok((e.losses, e.grads.expect("gradients requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;
    use rand::Rng as _;

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[vec![0.0, 1.0, 0.0]], &[1]), 0.0);
        let uniform = vec![vec![0.1; 10]];
        assert!((cross_entropy(&uniform, &[3]) - 10f64.ln()).abs() < 1e-12);
        assert!((cross_entropy(&[vec![0.5, 0.5]], &[0]) - 2f64.ln()).abs() < 1e-12);
        // floor
        assert!((cross_entropy(&[vec![1.0, 0.0]], &[1]) + LOG_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn smooth_l1_values() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0], 1.0).unwrap(), 0.125);
        assert_eq!(smooth_l1(&[0.0], &[2.0], 1.0).unwrap(), 1.5);
        assert!(smooth_l1(&[0.0], &[2.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn prototype_loss_skip_and_average() {
        let global: ProtoMap = [(0, vec![0.0, 0.0]), (1, vec![1.0, 1.0])].into();
        let zs = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        assert_eq!(loss_prototype(&zs, &[0, 1], &global, ProtoMetric::SmoothL1, 1.0), 0.0);
        assert_eq!(
            loss_prototype(&zs, &[0, 1], &ProtoMap::new(), ProtoMetric::SmoothL1, 1.0),
            0.0
        );
        // per-sample smooth-L1 0.2 (= 0.5 * 0.4 + 0) ... built from two dims
        let a = (0.4f64).sqrt() * 1.0; // 0.5 a^2 = 0.2
        let b = (0.8f64).sqrt(); // 0.5 b^2 = 0.4
        let zs = vec![vec![a, 0.0], vec![1.0 + b, 1.0]];
        let expected =
            (smooth_l1(&zs[0], &global[&0], 1.0).unwrap() + smooth_l1(&zs[1], &global[&1], 1.0).unwrap()) / 2.0;
        assert!((expected - 0.3).abs() < 1e-12);
        assert!((loss_prototype(&zs, &[0, 1], &global, ProtoMetric::SmoothL1, 1.0) - 0.3).abs() < 1e-12);
        // a class without a prototype is excluded from the denominator
        let zs3 = vec![zs[0].clone(), zs[1].clone(), vec![50.0, 50.0]];
        assert!((loss_prototype(&zs3, &[0, 1, 7], &global, ProtoMetric::SmoothL1, 1.0) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn semantic_loss_minority_filter() {
        let cents = vec![vec![0.0, 0.0], vec![4.0, 4.0]];
        let clusters: BTreeMap<usize, usize> = [(0, 0), (1, 1), (2, 1)].into();
        let zs = vec![vec![4.0, 4.0], vec![4.0, 4.0]];
        assert_eq!(
            loss_semantic(&zs, &[1, 2], &cents, &clusters, &BTreeSet::new(), 1.0).0,
            0.0
        );
        assert_eq!(
            loss_semantic(&zs, &[1, 1], &cents, &clusters, &BTreeSet::from([1]), 1.0).0,
            0.0
        );
        // minority sample at smooth-L1 0.8 from its centroid plus a majority sample
        let d = 1.3; // beyond delta: 1.3 - 0.5 = 0.8
        let zs = vec![vec![4.0 + d, 4.0], vec![100.0, 100.0]];
        let (l, unmapped) = loss_semantic(&zs, &[2, 0], &cents, &clusters, &BTreeSet::from([2]), 1.0);
        assert!((l - 0.8).abs() < 1e-12);
        assert_eq!(unmapped, 0);
        let (_, unmapped) = loss_semantic(&zs, &[9, 0], &cents, &clusters, &BTreeSet::from([9]), 1.0);
        assert_eq!(unmapped, 1);
    }

    #[test]
    fn intertask_values() {
        let zs = vec![vec![1.0, 0.0], vec![0.3, -2.0]];
        assert_eq!(
            loss_intertask(&zs, &[Some(zs[0].clone()), Some(zs[1].clone())], 1.0),
            0.0
        );
        assert_eq!(loss_intertask(&zs, &[None, None], 1.0), 0.0);
        // oracle: p = softmax([1,0]), q = softmax([0,1]), KL = sum p ln(p/q)
        let e = std::f64::consts::E;
        let p = [e / (e + 1.0), 1.0 / (e + 1.0)];
        let q = [p[1], p[0]];
        let oracle: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((oracle - 0.462117).abs() < 1e-6);
        let got = loss_intertask(&[vec![1.0, 0.0]], &[Some(vec![0.0, 1.0])], 1.0);
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn intertask_shift_invariant() {
        let mut rng = crate::rng::rng_for(2, &[]);
        for _ in 0..100 {
            let z: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let c: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let s = rng.random_range(-10.0..10.0);
            let zs: Vec<f64> = z.iter().map(|v| v + s).collect();
            let cs: Vec<f64> = c.iter().map(|v| v + s).collect();
            assert!((kl_divergence(&z, &c, 0.7) - kl_divergence(&zs, &cs, 0.7)).abs() < 1e-12);
            assert!(kl_divergence(&z, &c, 0.7) >= 0.0);
        }
    }

    const SHAPE: ModelShape = ModelShape {
        d_in: 4,
        hidden: 6,
        feature_dim: 3,
        classes: 3,
    };

    struct Fixture {
        xs: Vec<Vec<f64>>,
        ys: Vec<usize>,
        global: ProtoMap,
        cents: Vec<Vec<f64>>,
        clusters: BTreeMap<usize, usize>,
        minority: BTreeSet<usize>,
        previous: ProtoMap,
        local: Vec<Vec<f64>>,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            let mut rng = crate::rng::rng_for(seed, &[99]);
            let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
            Self {
                xs: (0..6).map(|_| v(4)).collect(),
                ys: vec![0, 1, 2, 0, 2, 1],
                global: [(0, v(3)), (2, v(3))].into(),
                cents: vec![v(3), v(3)],
                clusters: [(0, 0), (1, 1), (2, 1)].into(),
                minority: BTreeSet::from([1, 2]),
                previous: [(1, v(3))].into(),
                local: vec![v(3), v(3)],
            }
        }

        fn ctx(&self) -> ProtoContext<'_> {
            ProtoContext {
                global: Some(&self.global),
                semantic_centroids: &self.cents,
                cluster_of_class: Some(&self.clusters),
                minority: Some(&self.minority),
                previous: Some(&self.previous),
                local_centroids: &self.local,
                reference_mode: ReferenceMode::PerSample,
            }
        }

        fn batch(&self) -> Batch<'_> {
            Batch {
                xs: self.xs.iter().map(Vec::as_slice).collect(),
                ys: self.ys.clone(),
            }
        }
    }

    #[test]
    fn regularizers_off_is_cross_entropy() {
        let f = Fixture::new(1);
        let params = ModelParams::init(SHAPE, 4);
        let l = total_loss(
            &f.batch(),
            &params,
            &f.ctx(),
            &Hyperparams::default(),
            &Objective::cross_entropy_only(),
        )
        .unwrap();
        let probs: Vec<Vec<f64>> = f.xs.iter().map(|x| forward(&params, x).unwrap().probs).collect();
        assert_eq!(l.total, cross_entropy(&probs, &f.ys));
        assert_eq!((l.l_p, l.l_i, l.l_s), (0.0, 0.0, 0.0));
    }

    #[test]
    fn total_is_sum_of_component_oracles() {
        let f = Fixture::new(2);
        let params = ModelParams::init(SHAPE, 5);
        let hyper = Hyperparams {
            alpha: 0.7,
            ..Default::default()
        };
        let l = total_loss(&f.batch(), &params, &f.ctx(), &hyper, &Objective::all()).unwrap();

        let passes: Vec<Forward> = f.xs.iter().map(|x| forward(&params, x).unwrap()).collect();
        let zs: Vec<Vec<f64>> = passes.iter().map(|p| p.z.clone()).collect();
        let probs: Vec<Vec<f64>> = passes.iter().map(|p| p.probs.clone()).collect();
        let lc = cross_entropy(&probs, &f.ys);
        let lp = loss_prototype(&zs, &f.ys, &f.global, ProtoMetric::SmoothL1, 1.0);
        let refs = resolve_references(&zs, &f.ys, &f.ctx());
        let li = loss_intertask(&zs, &refs, 1.0);
        let (ls, _) = loss_semantic(&zs, &f.ys, &f.cents, &f.clusters, &f.minority, 1.0);
        assert!((l.total - (lc + lp + li + 0.7 * ls)).abs() < 1e-12);
        assert!(lp > 0.0 && li > 0.0 && ls > 0.0);
    }

    #[test]
    fn alpha_zero_ignores_semantic_prototypes() {
        let f = Fixture::new(3);
        let mut g = Fixture::new(3);
        g.cents = vec![vec![9.0; 3], vec![-9.0; 3]];
        let params = ModelParams::init(SHAPE, 6);
        let hyper = Hyperparams {
            alpha: 0.0,
            ..Default::default()
        };
        let a = total_loss(&f.batch(), &params, &f.ctx(), &hyper, &Objective::all()).unwrap();
        let b = total_loss(&g.batch(), &params, &g.ctx(), &hyper, &Objective::all()).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn alpha_scales_semantic_gradient_linearly() {
        let f = Fixture::new(4);
        let params = ModelParams::init(SHAPE, 7);
        let grad = |alpha: f64| {
            let hyper = Hyperparams {
                alpha,
                ..Default::default()
            };
            backward(&f.batch(), &params, &f.ctx(), &hyper, &Objective::all())
                .unwrap()
                .1
                .flatten()
        };
        let (g0, g1, g2) = (grad(0.0), grad(1.0), grad(2.0));
        for i in 0..g0.len() {
            let one = g1[i] - g0[i];
            let two = g2[i] - g0[i];
            assert!((two - 2.0 * one).abs() < 1e-12, "param {i}: {two} vs 2*{one}");
        }
        assert!(g1.iter().zip(&g0).any(|(a, b)| a != b));
    }

    #[test]
    fn regularizer_gradients_vanish_at_targets() {
        // features sitting exactly on their prototypes/references: the
        // prototype and inter-task terms contribute nothing to dL/dz
        let params = ModelParams::init(SHAPE, 8);
        let xs: Vec<Vec<f64>> = vec![vec![0.3, -0.2, 0.9, 0.1], vec![-0.5, 0.4, 0.0, 0.7]];
        let ys = vec![0, 1];
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| params.features(x).unwrap()).collect();
        let global: ProtoMap = [(0, zs[0].clone()), (1, zs[1].clone())].into();
        let ctx = ProtoContext {
            global: Some(&global),
            previous: Some(&global),
            ..Default::default()
        };
        let batch = Batch {
            xs: xs.iter().map(Vec::as_slice).collect(),
            ys,
        };
        let obj = Objective {
            prototype: true,
            intertask: true,
            ..Default::default()
        };
        let hyper = Hyperparams::default();
        let (l, with) = backward(&batch, &params, &ctx, &hyper, &obj).unwrap();
        assert_eq!((l.l_p, l.l_i), (0.0, 0.0));
        let (_, without) = backward(&batch, &params, &ctx, &hyper, &Objective::cross_entropy_only()).unwrap();
        for (a, b) in with.flatten().iter().zip(without.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn class_mean_references_share_one_centroid() {
        let zs = vec![vec![0.9, 0.0], vec![2.0, 0.0], vec![3.0, 0.0]];
        let ys = vec![5, 5, 5];
        let local = vec![vec![0.0, 0.0], vec![2.2, 0.0]];
        let ctx = ProtoContext {
            local_centroids: &local,
            reference_mode: ReferenceMode::ClassMean,
            ..Default::default()
        };
        let refs = resolve_references(&zs, &ys, &ctx);
        assert!(refs.iter().all(|r| r.as_deref() == Some(&[2.2, 0.0][..])));
        let per = ProtoContext {
            reference_mode: ReferenceMode::PerSample,
            ..ctx
        };
        assert_eq!(resolve_references(&zs, &ys, &per)[0].as_deref(), Some(&[0.0, 0.0][..]));
    }

    #[test]
    fn proximal_value_and_gradient() {
        let p = ModelParams::init(SHAPE, 1);
        let a = ModelParams::init(SHAPE, 2);
        let (v, g) = proximal(&p, &a, 0.5);
        let d: Vec<f64> = p.flatten().iter().zip(a.flatten()).map(|(x, y)| x - y).collect();
        assert!((v - 0.25 * d.iter().map(|x| x * x).sum::<f64>()).abs() < 1e-12);
        for (gi, di) in g.flatten().iter().zip(&d) {
            assert!((gi - 0.5 * di).abs() < 1e-15);
        }
    }
}
