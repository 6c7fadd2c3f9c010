use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Moment estimates for Adam, keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }

    /// Applies one update with a single learning rate for every parameter.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step_with(params, grads, &|_| lr, weight_decay)
    }

    /// Applies one update; `lr_of(name)` gives the learning rate of each
    /// parameter. Only parameters present in `grads` are touched.
    ///
    /// Weight decay is decoupled: `p -= lr·wd·p` is applied before the
    /// moment-based step and never enters the moment estimates.
    pub fn step_with(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Tensor>,
        lr_of: &dyn Fn(&str) -> f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::Invalid(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
            let lr = lr_of(name);
            if !(lr > 0.0) {
                return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let lr = lr_of(name);
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *pv -= lr * weight_decay * *pv;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
