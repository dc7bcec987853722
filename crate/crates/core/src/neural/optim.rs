//! Adam with bias correction. Moment buffers are positional, parallel to
//! the parameter set, so the optimizer must outlive resets of the set's
//! gradient accumulators but not of the set itself.

use serde::{Deserialize, Serialize};

use super::model::ParamSet;
use super::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam<T> {
    cfg: AdamParams,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamParams, params: &ParamSet<T>) -> Self {
        let m = (0..params.len()).map(|i| vec![T::ZERO; params.tensor(i).len()]).collect();
        let v = (0..params.len()).map(|i| vec![T::ZERO; params.tensor(i).len()]).collect();
        Adam { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update from the gradients currently accumulated on `params`.
    /// A parameter with no materialized gradient contributes zeros (its
    /// moments still decay). Does not clear gradients; callers zero them.
    pub fn step(&mut self, params: &mut ParamSet<T>) {
        self.step += 1;
        let b1 = T::from_f64(self.cfg.beta1);
        let b2 = T::from_f64(self.cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.cfg.beta2);
        let lr = T::from_f64(self.cfg.lr);
        let eps = T::from_f64(self.cfg.eps);
        let bc1 = T::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let bc2 = T::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));

        for i in 0..params.len() {
            let has_grad = params.tensor(i).grad().is_some();
            let tensor = params.tensor_mut(i);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..tensor.len() {
                let g = if has_grad { tensor.grad().unwrap()[j] } else { T::ZERO };
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                tensor.data_mut()[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
