//! Adam optimizer and learning-rate schedules.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::Tensor4;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Cosine { lr_start: f64, lr_end: f64, total_steps: u64 },
    StepHalf { lr_start: f64, interval: u64 },
}

impl Schedule {
    /// Training-protocol defaults: cosine from 2e-4 down to 1e-6.
    pub fn cosine_default(total_steps: u64) -> Schedule {
        Schedule::Cosine { lr_start: 2e-4, lr_end: 1e-6, total_steps }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match *self {
            Schedule::Cosine { lr_start, lr_end, total_steps } => {
                if step >= total_steps {
                    return lr_end;
                }
                let t = step as f64 / total_steps as f64;
                lr_end + 0.5 * (lr_start - lr_end) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            Schedule::StepHalf { lr_start, interval } => {
                lr_start * 0.5f64.powi((step / interval.max(1)) as i32)
            }
        }
    }
}

/// Per-parameter first/second moment accumulators, keyed structurally by
/// collection order.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Tensor4>,
    pub v: Vec<Tensor4>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(params: &[&Param]) -> Self {
        OptimState {
            m: params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor4::zeros(p.value.shape())).collect(),
            step: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

/// Route tape gradients into the parameters' grad buffers. Every
/// parameter must have a gradient entry; a missing one means the
/// parameter never entered the forward pass.
pub fn apply_grads(params: &mut [&mut Param], grads: &HashMap<u64, Tensor4>) -> Result<()> {
    for p in params.iter_mut() {
        match grads.get(&p.id()) {
            Some(g) => p.grad.add_assign(g),
            None => {
                return Err(Error::invalid(format!(
                    "missing gradient for parameter '{}'",
                    p.name
                )))
            }
        }
    }
    Ok(())
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut [&mut Param], max_norm: f64) -> f64 {
    let norm_sq: f64 =
        params.iter().map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

/// One bias-corrected Adam update at learning rate `lr`.
pub fn adam_step(params: &mut [&mut Param], state: &mut OptimState, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "optimizer state holds {} parameters, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        if p.grad.shape() != p.value.shape() {
            return Err(Error::invalid(format!("gradient shape mismatch for '{}'", p.name)));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for j in 0..g.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            w[j] -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}
