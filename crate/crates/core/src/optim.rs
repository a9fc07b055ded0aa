//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }
}

/// One Adam update of `param` at 1-based step `t`:
/// `m ← β₁m + (1−β₁)g`, `v ← β₂v + (1−β₂)g²`,
/// `p ← p − lr·m̂/(√v̂ + ε)` with `m̂ = m/(1−β₁ᵗ)`, `v̂ = v/(1−β₂ᵗ)`.
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Shape(format!(
            "parameter of length {} with gradient of length {} and moments of length {}",
            param.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if t == 0 {
        return Err(Error::State("Adam steps are counted from 1".into()));
    }
    let c = |x: f64| T::from_f64(x);
    let (b1, b2) = (c(cfg.beta1), c(cfg.beta2));
    let bc1 = c(1.0 - cfg.beta1.powi(t as i32));
    let bc2 = c(1.0 - cfg.beta2.powi(t as i32));
    let (lr, eps) = (c(cfg.lr), c(cfg.eps));
    let one = T::one();
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        param[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over every trainable parameter of a store, reading the gradients the
/// last backward pass accumulated. Parameters without a gradient are skipped.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    step: u64,
    ids: Vec<ParamId>,
    states: Vec<AdamState<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamConfig) -> Result<Self> {
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return Err(Error::config(
                "lr",
                "learning rate must be finite and non-negative",
            ));
        }
        if !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(Error::config("beta", "Adam betas must lie in [0, 1)"));
        }
        let ids = store.trainable_ids();
        let states = ids
            .iter()
            .map(|&id| store.get(id).map(|t| AdamState::new(t.len())))
            .collect::<Result<_>>()?;
        Ok(Adam {
            cfg,
            step: 0,
            ids,
            states,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update and clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        for (id, state) in self.ids.iter().zip(&mut self.states) {
            let t = store.get_mut(*id)?;
            if let Some(g) = t.grad.take() {
                adam_step(t.data_mut(), &g, state, self.step, &self.cfg)?;
            }
        }
        Ok(())
    }
}
