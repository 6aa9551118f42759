//! RMSprop with a stepwise exponential learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropConfig {
    pub lr0: f64,
    /// Learning-rate factor applied every `decay_steps` steps.
    pub gamma: f64,
    pub decay_steps: u64,
    pub rho: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self { lr0: 1e-4, gamma: 0.95, decay_steps: 200, rho: 0.9, eps: 1e-8 }
    }
}

impl RmsPropConfig {
    /// `lr0 * gamma^floor(step / decay_steps)`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr0 * self.gamma.powi((step / self.decay_steps.max(1)) as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.gamma > 0.0
            && self.gamma <= 1.0
            && self.decay_steps > 0
            && (0.0..1.0).contains(&self.rho)
            && self.eps > 0.0;
        if !ok {
            return Err(NnError::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// One update at the store's current step: `a <- rho a + (1 - rho) g^2`,
/// `p <- p - lr g / sqrt(a + eps)`. A non-finite gradient rejects the whole
/// step before anything is modified. Returns the learning rate used.
pub fn rmsprop_step(store: &mut ParamStore, grads: &[Tensor], cfg: &RmsPropConfig) -> Result<f64> {
    if grads.len() != store.len() {
        return Err(NnError::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != store.value(i).shape() {
            return Err(NnError::Shape(format!("gradient shape {:?} for {}", g.shape(), store.names()[i])));
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient(store.names()[i].clone()));
        }
    }
    let lr = cfg.lr_at(store.step);
    for (i, g) in grads.iter().enumerate() {
        let (p, a) = store.value_and_accum_mut(i);
        for ((pv, av), gv) in p.data_mut().iter_mut().zip(a.data_mut()).zip(g.data()) {
            *av = cfg.rho * *av + (1.0 - cfg.rho) * gv * gv;
            *pv -= lr * gv / (*av + cfg.eps).sqrt();
        }
    }
    store.step += 1;
    Ok(lr)
}
