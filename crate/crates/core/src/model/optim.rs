use serde::{Deserialize, Serialize};

use super::ModelParams;

/// Local training hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Weight of the semantic-prototype term.
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub kl_temperature: f64,
    pub smooth_l1_delta: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-5,
            batch_size: 32,
            kl_temperature: 1.0,
            smooth_l1_delta: 1.0,
        }
    }
}

/// Momentum buffer, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Velocity(pub ModelParams);

impl Velocity {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self(ModelParams::zeros(params.shape()))
    }
}

/// `v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v`
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, velocity: &mut Velocity, hyper: &Hyperparams) {
    for ((p, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(velocity.0.tensors_mut())
    {
        for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
            *vi = hyper.momentum * *vi + gi + hyper.weight_decay * *pi;
            *pi -= hyper.lr * *vi;
        }
    }
}
