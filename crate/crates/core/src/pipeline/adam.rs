//! Adam with bias correction: beta1 = 0.9, beta2 = 0.999, eps = 1e-8.

use crate::model::{ModelGrads, ModelParams};

use super::PipelineError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First and second moment estimates, one slot per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn moments(&self, i: usize) -> (f64, f64) {
        (self.m[i], self.v[i])
    }
}

/// One Adam update over a flat value/gradient pair. `t` is the 1-based
/// step index used for bias correction.
pub fn adam_update(values: &mut [f64], grads: &[f64], state: &mut AdamState, t: usize, lr: f64) {
    assert!(t >= 1, "step index is 1-based");
    assert_eq!(values.len(), grads.len());
    assert_eq!(values.len(), state.m.len());
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..values.len() {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
}

/// Adam over a model's parameters. Non-finite gradients abort with a
/// numeric failure naming the offending magnitude.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    t: usize,
    lr: f64,
) -> Result<(), PipelineError> {
    let mut flat_grads = Vec::with_capacity(state.len());
    grads.for_each_param(|g| flat_grads.push(g));
    adam_step_flat(params, &flat_grads, state, t, lr)
}

/// [`adam_step`] with gradients already flattened in canonical order.
pub fn adam_step_flat(
    params: &mut ModelParams,
    grads: &[f64],
    state: &mut AdamState,
    t: usize,
    lr: f64,
) -> Result<(), PipelineError> {
    if t == 0 {
        return Err(PipelineError::Config("adam step index must be >= 1".into()));
    }
    if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
        return Err(PipelineError::Numeric(format!(
            "non-finite gradient ({g}) at step {t}"
        )));
    }
    if grads.len() != state.len() {
        return Err(PipelineError::Config(format!(
            "adam state sized for {} params, model has {}",
            state.len(),
            grads.len()
        )));
    }
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    let mut i = 0;
    params.for_each_param_mut(|p| {
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        i += 1;
    });
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchSpec};
    use crate::numcore::SeededRng;

    #[test]
    fn first_step_is_signed_learning_rate() {
        for g in [3.7, -0.002, 1e6] {
            let mut x = [1.0];
            let mut state = AdamState::new(1);
            adam_update(&mut x, &[g], &mut state, 1, 0.001);
            let update = x[0] - 1.0;
            assert!(
                (update.abs() - 0.001).abs() <= 0.01 * 0.001,
                "grad {g}: |update| {}",
                update.abs()
            );
            assert_eq!(update.signum(), -g.signum());
        }
    }

    #[test]
    fn zero_grads_leave_params_and_moments_untouched() {
        let mut x = [0.4, -1.2];
        let mut state = AdamState::new(2);
        for t in 1..=5 {
            adam_update(&mut x, &[0.0, 0.0], &mut state, t, 0.01);
        }
        assert_eq!(x, [0.4, -1.2]);
        assert_eq!(state.moments(0), (0.0, 0.0));
        assert_eq!(state.moments(1), (0.0, 0.0));
    }

    #[test]
    fn converges_on_1d_quadratic() {
        // 0.5 x^2 from x = 1, lr = 0.01. Updates are near-sign-sized, so
        // the approach takes ~100 steps and then the momentum average
        // cancels while v stays positive, collapsing the step size.
        let mut x = [1.0];
        let mut state = AdamState::new(1);
        for t in 1..=500 {
            let g = x[0];
            adam_update(&mut x, &[g], &mut state, t, 0.01);
        }
        assert!(x[0].abs() < 1e-3, "x after 500 steps: {}", x[0]);
    }

    #[test]
    fn model_step_matches_flat_update() {
        let arch = ArchSpec {
            input_dim: 3,
            ff_pre: vec![4],
            blstm: vec![2],
            ff_post: vec![],
            out_dim: 2,
        };
        let mut params = init_params(&arch, &mut SeededRng::new(1)).unwrap();
        let mut rng = SeededRng::new(2);
        let mut grads = params.zeros_like();
        grads.for_each_param_mut(|g| *g = rng.normal());

        let mut flat = params.to_flat().into_data();
        let mut flat_grads = Vec::new();
        grads.for_each_param(|g| flat_grads.push(g));
        let mut s1 = AdamState::new(flat.len());
        let mut s2 = AdamState::new(flat.len());

        adam_update(&mut flat, &flat_grads, &mut s1, 1, 0.001);
        adam_step(&mut params, &grads, &mut s2, 1, 0.001).unwrap();
        let after = params.to_flat().into_data();
        assert_eq!(flat, after);
    }

    #[test]
    fn non_finite_grads_abort() {
        let arch = ArchSpec {
            input_dim: 2,
            ff_pre: vec![],
            blstm: vec![],
            ff_post: vec![],
            out_dim: 2,
        };
        let mut params = init_params(&arch, &mut SeededRng::new(1)).unwrap();
        let mut grads = params.zeros_like();
        grads.for_each_param_mut(|g| *g = f64::NAN);
        let mut state = AdamState::new(params.param_count());
        let err = adam_step(&mut params, &grads, &mut state, 1, 0.001).unwrap_err();
        assert!(matches!(err, PipelineError::Numeric(_)));
    }
}
