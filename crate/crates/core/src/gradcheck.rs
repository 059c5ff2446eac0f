//! Central finite-difference check of the analytic gradient on random small
//! models, for every on/off combination of the three regularizers.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng as _;

use crate::error::Result;
use crate::model::{backward, total_loss, Batch, Hyperparams, ModelParams, ModelShape, Objective, ProtoContext};
use crate::prototypes::ProtoMap;
use crate::rng::rng_for;

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Gradient magnitudes below this are compared absolutely rather than
/// relatively (finite differences cannot resolve them any better).
pub const ABS_FLOOR: f64 = 1e-6;

/// A random problem instance: model, batch and prototype context.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: ModelParams,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<usize>,
    pub global: ProtoMap,
    pub semantic: Vec<Vec<f64>>,
    pub clusters: BTreeMap<usize, usize>,
    pub minority: BTreeSet<usize>,
    pub previous: ProtoMap,
    pub local: Vec<Vec<f64>>,
    pub hyper: Hyperparams,
}

/// Instances whose ReLU inputs, Smooth-L1 arguments or nearest-centroid
/// choices sit closer than this to a branch point are redrawn: a central
/// difference straddling a kink measures neither one-sided derivative.
pub const KINK_MARGIN: f64 = 1e-2;

impl Instance {
    /// Random instance, redrawn until it is at least [`KINK_MARGIN`] away
    /// from every non-differentiable point.
    pub fn random(seed: u64) -> Self {
        (0u64..)
            .map(|attempt| Self::draw(seed, attempt))
            .find(|inst| inst.kink_distance() > KINK_MARGIN)
            .expect("unbounded search")
    }

    /// Smallest distance of any branch quantity to its switching point.
    pub fn kink_distance(&self) -> f64 {
        let delta = self.hyper.smooth_l1_delta;
        let mut margin = f64::INFINITY;
        let mut huber = |z: &[f64], c: &[f64]| {
            for (a, b) in z.iter().zip(c) {
                margin = margin.min(((a - b).abs() - delta).abs());
            }
        };
        let mut passes = Vec::new();
        for (x, &y) in self.xs.iter().zip(&self.ys) {
            let f = crate::model::forward(&self.params, x).expect("instance dims agree");
            if let Some(g) = self.global.get(&y) {
                huber(&f.z, g);
            }
            if let Some(p) = self.clusters.get(&y).and_then(|&v| self.semantic.get(v)) {
                huber(&f.z, p);
            }
            passes.push(f);
        }
        for f in &passes {
            margin = margin.min(f.pre_hidden.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min));
            let mut d: Vec<f64> = self
                .local
                .iter()
                .map(|c| c.iter().zip(&f.z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            d.sort_by(f64::total_cmp);
            if d.len() > 1 {
                margin = margin.min(d[1] - d[0]);
            }
        }
        margin
    }

    fn draw(seed: u64, attempt: u64) -> Self {
        let mut rng = rng_for(seed, &[0x6772_6164, attempt]);
        let shape = ModelShape {
            d_in: rng.random_range(1..=8),
            hidden: rng.random_range(2..=16),
            feature_dim: rng.random_range(2..=8),
            classes: rng.random_range(2..=5),
        };
        let params = ModelParams::init(shape, rng.random());
        let mut vec = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };
        let n = 8;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec(shape.d_in, 2.0)).collect();
        let d = shape.feature_dim;
        let k = shape.classes;
        let semantic: Vec<Vec<f64>> = (0..2).map(|_| vec(d, 1.5)).collect();
        let local: Vec<Vec<f64>> = (0..3).map(|_| vec(d, 1.5)).collect();
        let global: ProtoMap = (0..k).filter(|c| c % 3 != 2).map(|c| (c, vec(d, 1.5))).collect();
        let previous: ProtoMap = (0..k).filter(|c| c % 2 == 0).map(|c| (c, vec(d, 1.5))).collect();
        let mut rng = rng_for(seed, &[0x79, attempt]);
        let ys: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let clusters: BTreeMap<usize, usize> = (0..k).map(|c| (c, c % 2)).collect();
        let minority: BTreeSet<usize> = (0..k).filter(|c| c % 2 == 1).collect();
        let hyper = Hyperparams {
            alpha: rng.random_range(0.1..2.0),
            kl_temperature: rng.random_range(0.5..2.0),
            ..Default::default()
        };
        Self {
            params,
            xs,
            ys,
            global,
            semantic,
            clusters,
            minority,
            previous,
            local,
            hyper,
        }
    }

    pub fn ctx(&self) -> ProtoContext<'_> {
        ProtoContext {
            global: Some(&self.global),
            semantic_centroids: &self.semantic,
            cluster_of_class: Some(&self.clusters),
            minority: Some(&self.minority),
            previous: Some(&self.previous),
            local_centroids: &self.local,
            ..Default::default()
        }
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            xs: self.xs.iter().map(Vec::as_slice).collect(),
            ys: self.ys.clone(),
        }
    }
}

/// All eight combinations of the prototype / inter-task / semantic toggles.
pub fn all_objectives() -> Vec<Objective> {
    (0..8u8)
        .map(|m| Objective {
            prototype: m & 1 != 0,
            intertask: m & 2 != 0,
            semantic: m & 4 != 0,
            ..Default::default()
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOutcome {
    pub max_relative_error: f64,
    pub params_checked: usize,
}

/// Compares every analytic partial derivative with a central difference.
pub fn check(instance: &Instance, objective: &Objective) -> Result<CheckOutcome> {
    let batch = instance.batch();
    let ctx = instance.ctx();
    let (_, grads) = backward(&batch, &instance.params, &ctx, &instance.hyper, objective)?;
    let analytic = grads.flatten();
    let base = instance.params.flatten();
    let mut probe = instance.params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut flat = base.clone();
        flat[i] = base[i] + STEP;
        probe.set_flat(&flat);
        let up = total_loss(&batch, &probe, &ctx, &instance.hyper, objective)?.total;
        flat[i] = base[i] - STEP;
        probe.set_flat(&flat);
        let down = total_loss(&batch, &probe, &ctx, &instance.hyper, objective)?.total;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(CheckOutcome {
        max_relative_error: worst,
        params_checked: base.len(),
    })
}

/// Runs [`check`] on `instances` random instances x 8 objectives and
/// returns the worst relative error seen.
pub fn run(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let inst = Instance::random(seed.wrapping_add(i as u64));
        for obj in all_objectives() {
            worst = worst.max(check(&inst, &obj)?.max_relative_error);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_objectives() {
        let objs = all_objectives();
        assert_eq!(objs.len(), 8);
        assert_eq!(
            objs.iter().filter(|o| o.prototype && o.intertask && o.semantic).count(),
            1
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        let worst = run(5, 100).unwrap();
        assert!(worst < TOLERANCE, "worst relative error {worst}");
    }
}
