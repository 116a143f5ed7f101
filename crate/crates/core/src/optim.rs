//! Adam with bias correction.

use std::sync::Arc;

use crate::model::{ParamLayout, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimError {
    #[error("non-finite gradient in tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("optimizer state does not match the parameter layout")]
    LayoutMismatch,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the number of updates taken.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: ParamSet<S>,
    pub v: ParamSet<S>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(layout: Arc<ParamLayout>) -> Self {
        AdamState {
            m: ParamSet::zeros(layout.clone()),
            v: ParamSet::zeros(layout),
            t: 0,
        }
    }
}

/// One Adam update with learning rate `lr`. Gradients are checked for NaN or
/// infinity before anything is modified.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    state: &mut AdamState<S>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<(), OptimError> {
    if params.layout() != grads.layout()
        || params.layout() != state.m.layout()
        || params.layout() != state.v.layout()
    {
        return Err(OptimError::LayoutMismatch);
    }
    if let Some(name) = grads.first_non_finite() {
        return Err(OptimError::NonFiniteGradient(name.to_string()));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let (c1, c2) = (S::one() - b1, S::one() - b2);
    let bias1 = S::lit(1.0 - cfg.beta1.powi(t));
    let bias2 = S::lit(1.0 - cfg.beta2.powi(t));
    let (lr, eps) = (S::lit(lr), S::lit(cfg.eps));
    let p = params.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (i, &g) in grads.as_slice().iter().enumerate() {
        m[i] = b1 * m[i] + c1 * g;
        v[i] = b2 * v[i] + c2 * g * g;
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut ParamSet<S>, max_norm: f64) -> f64 {
    let norm = grads
        .as_slice()
        .iter()
        .map(|g| g.as_f64().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = S::lit(max_norm / norm);
        grads.as_mut_slice().iter_mut().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_layout() -> Arc<ParamLayout> {
        Arc::new(ParamLayout::new(&ModelConfig {
            n_layers: 1,
            n_heads: 1,
            d_model: 2,
            d_ff: 2,
            max_seq_len: 2,
            vocab_size: 3,
            dropout: 0.0,
        }))
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let layout = tiny_layout();
        let cfg = AdamConfig::default();
        for g in [0.37f64, -2.5, 1e-3] {
            let mut params = ParamSet::<f64>::zeros(layout.clone());
            let mut grads = ParamSet::zeros(layout.clone());
            grads.as_mut_slice().fill(g);
            let mut state = AdamState::new(layout.clone());
            adam_step(&mut params, &grads, &mut state, &cfg, 1e-4).unwrap();
            // m̂ = g, v̂ = g², so the step is −lr·g/(|g| + ε).
            let expected = -1e-4 * g / (g.abs() + 1e-8);
            for &p in params.as_slice() {
                assert!((p - expected).abs() < 1e-18, "{p} vs {expected}");
                assert!((p + 1e-4 * g.signum()).abs() < 1e-4 * 1e-8 / g.abs() + 1e-18);
            }
            assert_eq!(state.t, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let layout = tiny_layout();
        let cfg = AdamConfig::default();
        let mut params = ParamSet::<f64>::zeros(layout.clone());
        params.as_mut_slice().fill(0.5);
        let mut state = AdamState::new(layout.clone());
        state.m.as_mut_slice().fill(0.2);
        state.v.as_mut_slice().fill(0.04);
        state.t = 5;
        // A zero gradient still moves parameters through momentum; with zero
        // moments it must not.
        let zero = ParamSet::zeros(layout.clone());
        let mut fresh = AdamState::new(layout.clone());
        let before = params.clone();
        adam_step(&mut params, &zero, &mut fresh, &cfg, 1e-3).unwrap();
        assert_eq!(params, before);
        adam_step(&mut params, &zero, &mut state, &cfg, 1e-3).unwrap();
        assert!(state.m.as_slice().iter().all(|&m| (m - 0.18).abs() < 1e-15));
        assert!(state
            .v
            .as_slice()
            .iter()
            .all(|&v| (v - 0.04 * 0.999).abs() < 1e-15));
    }

    #[test]
    fn matches_reference_over_several_steps() {
        let layout = tiny_layout();
        let cfg = AdamConfig::default();
        let mut params = ParamSet::<f64>::zeros(layout.clone());
        let mut state = AdamState::new(layout.clone());
        let (mut p, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        for step in 1..=5 {
            let g = (step as f64 * 0.7).sin();
            let mut grads = ParamSet::zeros(layout.clone());
            grads.as_mut_slice().fill(g);
            adam_step(&mut params, &grads, &mut state, &cfg, 0.01).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(step));
            let vh = v / (1.0 - 0.999f64.powi(step));
            p -= 0.01 * mh / (vh.sqrt() + 1e-8);
            assert!((params.as_slice()[0] - p).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_tensor_and_changes_nothing() {
        let layout = tiny_layout();
        let mut params = ParamSet::<f32>::zeros(layout.clone());
        let mut grads = ParamSet::zeros(layout.clone());
        let idx = layout.index_of("h0.mlp.b_fc").unwrap();
        grads.tensor_mut(idx)[1] = f32::NAN;
        let mut state = AdamState::new(layout.clone());
        let err = adam_step(
            &mut params,
            &grads,
            &mut state,
            &AdamConfig::default(),
            1e-3,
        )
        .unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("h0.mlp.b_fc".into()));
        assert_eq!(state.t, 0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let layout = tiny_layout();
        let mut grads = ParamSet::<f64>::zeros(layout.clone());
        grads.as_mut_slice().fill(1.0);
        let n = grads.as_slice().len() as f64;
        let before = clip_grad_norm(&mut grads, 1.0);
        assert!((before - n.sqrt()).abs() < 1e-12);
        let after = grads.as_slice().iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
