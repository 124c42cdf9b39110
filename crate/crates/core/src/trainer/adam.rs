use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::Param;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "adam needs beta1, beta2 in [0, 1) and eps > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// First and second moment accumulators per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        OptState {
            m: params.iter().map(|p| p.value.zeros_like()).collect(),
            v: params.iter().map(|p| p.value.zeros_like()).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Gradients are checked before anything is
/// modified, so a non-finite gradient leaves parameters and state untouched.
pub fn adam_step<T: Real>(
    params: &mut [Param<T>],
    grads: &[Tensor<T>],
    state: &mut OptState<T>,
    rate: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if !(rate > 0.0) {
        return Err(Error::Config(format!("learning rate must be > 0, got {rate}")));
    }
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::Shape(format!(
            "adam step over {} parameters with {} gradients and {} accumulators",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.value.shape() != g.shape() || m.shape() != g.shape() {
            return Err(Error::Shape(format!(
                "gradient {:?} does not match parameter `{}` {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
    }

    state.t += 1;
    let t = state.t as f64;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let update = rate * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *w = T::from_f64_lossy(w.as_f64() - update);
        }
    }
    Ok(())
}
