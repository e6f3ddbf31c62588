use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One AdamW update of `param` in place. Weight decay is decoupled and
/// applied before the moment-based step.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(AutodiffError::NonFiniteGradient("tensor".into()));
    }
    if state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *p -= cfg.lr * cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over every tensor of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    states: Vec<AdamWState>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            states: Vec::new(),
        }
    }

    /// Apply the accumulated gradients; does not zero them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.states.len() < store.len() {
            self.states.resize(store.len(), AdamWState::default());
        }
        // validate everything first so a bad tensor leaves the store untouched
        for id in store.ids() {
            if !store.grad(id).is_finite() {
                return Err(AutodiffError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        for id in store.ids() {
            let grad = store.grad(id).data().to_vec();
            let state = &mut self.states[id.index()];
            let cfg = self.config;
            adamw_step(store.value_mut(id).data_mut(), &grad, state, &cfg)?;
        }
        Ok(())
    }
}
