//! Two-part model: an MLP feature extractor `x -> relu(W1 x + b1) -> z`
//! followed by an affine classifier `z -> logits`, plus the local training
//! objective and optimizer.

mod loss;
mod optim;

pub use loss::{
    backward, cross_entropy, kl_divergence, loss_intertask, loss_prototype, loss_semantic, proximal,
    resolve_references, smooth_l1, total_loss, Batch, LossBreakdown, Objective, ProtoContext, ProtoMetric,
    ReferenceMode,
};
pub use optim::{sgd_step, Hyperparams, Velocity};

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream as tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_in: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
}

/// Affine layer; `weight` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn uniform(inputs: usize, outputs: usize, rng: &mut crate::rng::Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: (0..outputs).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.bias
                .iter()
                .zip(self.weight.chunks_exact(self.inputs))
                .map(|(b, row)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()),
        );
    }
}

/// Feature extractor (`hidden`, `feature`) and classifier parameters.
/// Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub hidden: Dense,
    pub feature: Dense,
    pub classifier: Dense,
}

/// Output of a forward pass for one sample.
#[derive(Debug, Clone)]
pub struct Forward {
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    pub z: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        Self {
            hidden: Dense::zeros(shape.d_in, shape.hidden),
            feature: Dense::zeros(shape.hidden, shape.feature_dim),
            classifier: Dense::zeros(shape.feature_dim, shape.classes),
        }
    }

    /// Uniform `±1/sqrt(fan_in)` initialization.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::INIT]);
        Self {
            hidden: Dense::uniform(shape.d_in, shape.hidden, &mut rng),
            feature: Dense::uniform(shape.hidden, shape.feature_dim, &mut rng),
            classifier: Dense::uniform(shape.feature_dim, shape.classes, &mut rng),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            d_in: self.hidden.inputs,
            hidden: self.hidden.outputs,
            feature_dim: self.feature.outputs,
            classes: self.classifier.outputs,
        }
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            &self.hidden.weight,
            &self.hidden.bias,
            &self.feature.weight,
            &self.feature.bias,
            &self.classifier.weight,
            &self.classifier.bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.hidden.weight,
            &mut self.hidden.bias,
            &mut self.feature.weight,
            &mut self.feature.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
        ]
    }

    /// Number of leading tensors in [`tensors`](Self::tensors) that belong
    /// to the feature extractor.
    pub const EXTRACTOR_TENSORS: usize = 4;

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut rest = flat;
        for t in self.tensors_mut() {
            let (head, tail) = rest.split_at(t.len());
            t.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(forward(self, x)?.z)
    }
}

pub fn forward(params: &ModelParams, x: &[f64]) -> Result<Forward> {
    if x.len() != params.hidden.inputs {
        return Err(Error::DimensionMismatch {
            expected: params.hidden.inputs,
            actual: x.len(),
        });
    }
    let mut pre_hidden = Vec::new();
    params.hidden.apply(x, &mut pre_hidden);
    let hidden: Vec<f64> = pre_hidden.iter().map(|&v| v.max(0.0)).collect();
    let mut z = Vec::new();
    params.feature.apply(&hidden, &mut z);
    let mut logits = Vec::new();
    params.classifier.apply(&z, &mut logits);
    let probs = softmax(&logits);
    Ok(Forward {
        pre_hidden,
        hidden,
        z,
        logits,
        probs,
    })
}

/// Index of the largest logit; ties go to the lowest class id.
pub fn predict(params: &ModelParams, x: &[f64]) -> Result<usize> {
    let f = forward(params, x)?;
    Ok(argmax(&f.logits))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    const SHAPE: ModelShape = ModelShape {
        d_in: 5,
        hidden: 7,
        feature_dim: 4,
        classes: 3,
    };

    #[test]
    fn zero_model_gives_uniform_probs() {
        let p = ModelParams::zeros(SHAPE);
        let f = forward(&p, &[1.0, -2.0, 3.0, 0.5, 0.0]).unwrap();
        assert!(f.logits.iter().all(|&l| l == 0.0));
        assert!(f.probs.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn probs_on_simplex_and_feature_dim() {
        let p = ModelParams::init(SHAPE, 3);
        let mut rng = rng_for(1, &[]);
        for _ in 0..1000 {
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
            let f = forward(&p, &x).unwrap();
            assert_eq!(f.z.len(), SHAPE.feature_dim);
            assert!((f.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(f.probs.iter().all(|&q| q > 0.0 && q < 1.0));
        }
    }

    #[test]
    fn forward_rejects_wrong_dim() {
        let p = ModelParams::zeros(SHAPE);
        assert!(matches!(
            forward(&p, &[1.0]),
            Err(Error::DimensionMismatch { expected: 5, actual: 1 })
        ));
    }

    #[test]
    fn flat_roundtrip() {
        let p = ModelParams::init(SHAPE, 9);
        let mut q = ModelParams::zeros(SHAPE);
        q.set_flat(&p.flatten());
        assert_eq!(p, q);
        assert_eq!(p.num_params(), 5 * 7 + 7 + 7 * 4 + 4 + 4 * 3 + 3);
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
