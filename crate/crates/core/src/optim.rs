//! Adam with decoupled weight decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{GradStore, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.lr) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must be in [0, 1)".into()));
        }
        if !finite_pos(self.eps) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) || self.lr * self.weight_decay >= 1.0 {
            return Err(Error::Config(format!(
                "weight decay {} must be >= 0 with lr * decay < 1",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Moment buffers and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: BTreeMap<String, Vec<f64>>,
    pub second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            params.iter().map(|(k, t)| (k.to_string(), vec![0.0; t.numel()])).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

/// One AdamW update of every parameter:
///
/// ```text
/// m = b1 m + (1 - b1) g          v = b2 v + (1 - b2) g^2
/// theta = theta (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)
/// ```
pub fn adamw_step(params: &mut ParamStore, grads: &GradStore, state: &mut OptimizerState) -> Result<()> {
    for (name, t) in params.iter() {
        match grads.get(name) {
            Some(g) if g.len() == t.numel() => {}
            Some(g) => {
                return Err(Error::Input(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    t.numel()
                )))
            }
            None => return Err(Error::Input(format!("missing gradient for {name}"))),
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    let decay = 1.0 - c.lr * c.weight_decay;
    for (name, theta) in params.iter_mut() {
        let g = &grads[name];
        let m = state.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.second.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
            *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *p = *p * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
    }
    Ok(())
}
