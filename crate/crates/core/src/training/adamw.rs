//! AdamW: Adam with weight decay applied directly to the parameters rather
//! than folded into the gradient.

use crate::combiner::{CombinerParams, TENSOR_NAMES};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-5,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &CombinerParams<T>) -> Self {
        let zeros: Vec<Vec<T>> = params
            .tensors()
            .iter()
            .map(|t| vec![T::zero(); t.len()])
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One in-place update. For each parameter `p` with gradient `g`:
///
/// ```text
/// p <- p - lr * wd * p
/// m <- b1 m + (1 - b1) g ;  v <- b2 v + (1 - b2) g^2
/// p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
///
/// Gradients are checked before anything is modified; a non-finite value
/// aborts with the tensor name.
pub fn adamw_step<T: Scalar>(
    params: &mut CombinerParams<T>,
    grads: &CombinerParams<T>,
    state: &mut OptimizerState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    let grad_tensors = grads.tensors();
    if grads.d != params.d || state.first.len() != grad_tensors.len() {
        return Err(Error::ShapeMismatch(
            "gradient/optimizer state do not match parameters".into(),
        ));
    }
    for (name, g) in TENSOR_NAMES.iter().zip(&grad_tensors) {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient((*name).to_string()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let c = |v: f64| T::from_f64_lossy(v);
    let lr = c(cfg.learning_rate);
    let decay = c(1.0 - cfg.learning_rate * cfg.weight_decay);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let (one_b1, one_b2) = (c(1.0 - cfg.beta1), c(1.0 - cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(t));
    let bc2 = c(1.0 - cfg.beta2.powi(t));
    let eps = c(cfg.eps);

    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grad_tensors)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::ShapeMismatch("tensor length mismatch".into()));
        }
        for i in 0..p.len() {
            p[i] *= decay;
            m[i] = b1 * m[i] + one_b1 * g[i];
            v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
