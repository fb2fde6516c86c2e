use serde::{Deserialize, Serialize};

use super::params::{cst, GeneratorParams, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Running first and second moments, one slot per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub step: u64,
    pub m: GeneratorParams<F>,
    pub v: GeneratorParams<F>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &GeneratorParams<F>) -> Self {
        AdamState {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// Bias-corrected Adam update. Fails without touching anything if any
/// gradient entry is non-finite.
pub fn optimizer_step<F: Scalar>(
    params: &mut GeneratorParams<F>,
    grads: &GeneratorParams<F>,
    state: &mut AdamState<F>,
    hyper: &AdamConfig,
) -> Result<()> {
    grads.check_finite()?;
    if params.n_params() != grads.n_params() {
        return Err(Error::Config("gradient layout does not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1: F = cst(hyper.beta1);
    let b2: F = cst(hyper.beta2);
    let bc1: F = cst(1.0 - hyper.beta1.powi(t));
    let bc2: F = cst(1.0 - hyper.beta2.powi(t));
    let lr: F = cst(hyper.lr);
    let eps: F = cst(hyper.eps);
    let one = F::one();

    let blocks = params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.m.blocks_mut())
        .zip(state.v.blocks_mut());
    for ((((_, p), (_, g)), (_, m)), (_, v)) in blocks {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (one - b1) * gi;
            v.data[i] = b2 * v.data[i] + (one - b2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so its global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<F: Scalar>(grads: &mut GeneratorParams<F>, max_norm: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm.is_finite() && norm > max_norm && max_norm > 0.0 {
        grads.scale(cst(max_norm / norm));
    }
    norm
}
