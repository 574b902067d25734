//! Gradient clipping and Adam.

use crate::error::{DiffError, Result};
use crate::grad::GradientMap;
use crate::tape::Array;

/// Rescales `grads` so their global L2 norm does not exceed `max_norm`.
///
/// Norms within a relative `1e-12` of the bound are left alone, which makes
/// clipping idempotent under rounding.
pub fn clip_gradient_norm(grads: &GradientMap, max_norm: f64) -> Result<GradientMap> {
    if !(max_norm > 0.0) {
        return Err(DiffError::InvalidArgument(format!("max_norm must be positive, got {max_norm}")));
    }
    if grads.arrays().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(DiffError::NonFinite("gradient".into()));
    }
    let norm = grads.global_norm();
    if norm > max_norm * (1.0 + 1e-12) {
        let factor = max_norm / norm;
        Ok(grads.map_arrays(|g| g.mapv(|x| x * factor)))
    } else {
        Ok(grads.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Array>,
    pub second_moment: Vec<Array>,
    pub step: u64,
}

impl OptimizerState {
    pub fn zeros_like(params: &[Array]) -> Self {
        Self {
            first_moment: params.iter().map(|p| Array::zeros(p.dim())).collect(),
            second_moment: params.iter().map(|p| Array::zeros(p.dim())).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update with the default betas.
pub fn adam_step(params: &mut [Array], grads: &[Array], state: &mut OptimizerState, lr: f64) -> Result<()> {
    adam_step_with(AdamConfig::default(), params, grads, state, lr)
}

pub fn adam_step_with(
    cfg: AdamConfig,
    params: &mut [Array],
    grads: &[Array],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(DiffError::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(DiffError::InvalidArgument(format!(
            "adam: {} params, {} grads, {} moment slots",
            n,
            grads.len(),
            state.first_moment.len()
        )));
    }
    for i in 0..n {
        let d = params[i].dim();
        if grads[i].dim() != d || state.first_moment[i].dim() != d || state.second_moment[i].dim() != d {
            return Err(DiffError::ShapeMismatch {
                op: "adam",
                shapes: vec![d, grads[i].dim(), state.first_moment[i].dim()],
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        ndarray::Zip::from(&mut params[i])
            .and(&grads[i])
            .and(&mut state.first_moment[i])
            .and(&mut state.second_moment[i])
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    Ok(())
}
