//! Nesterov SGD with weight decay and the cosine learning-rate schedule.

use crate::autodiff::{GradResult, ParamId};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Velocity buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T: Scalar = f32> {
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            velocity: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

/// `v ← m·v + d`, `θ ← θ − lr·(d + m·v)` with `d = g + wd·θ`.
pub fn sgd_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &GradResult<T>,
    state: &mut SgdState<T>,
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    if grads.grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} velocity buffers for {} parameters",
            grads.grads.len(),
            state.velocity.len(),
            params.len()
        )));
    }
    let (m, wd, lr) = (
        T::from_f64(cfg.momentum),
        T::from_f64(cfg.weight_decay),
        T::from_f64(lr),
    );
    for (i, (theta, v)) in params.tensors.iter_mut().zip(&mut state.velocity).enumerate() {
        let g = grads
            .get(ParamId(i))
            .ok_or_else(|| Error::invalid(format!("no gradient for parameter {i}")))?;
        if g.shape() != theta.shape() || v.shape() != theta.shape() {
            return Err(Error::shape("sgd_step", theta.shape(), g.shape()));
        }
        for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            let d = g + wd * *t;
            *v = m * *v + d;
            *t = *t - lr * (d + m * *v);
        }
    }
    Ok(())
}

/// `lr0·½(1 + cos(π·t/T))`, with `t` clamped to `[0, T]`.
pub fn cosine_lr(t: usize, total: usize, lr0: f64) -> f64 {
    let total = total.max(1);
    let t = t.min(total);
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t as f64 / total as f64).cos())
}
