//! Adam with bias correction, operating on the model's flat leaf order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::TensorData;

/// Optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0,1), got {b}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("adam eps must be > 0".to_string()));
        }
        Ok(())
    }
}

/// First/second moment buffers, one per parameter leaf in traversal order,
/// plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<TensorData>,
    pub v: Vec<TensorData>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams<TensorData>) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(TensorData::zeros(t.shape())));
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One optimization step. `grads` must align with the traversal order;
/// an empty gradient slot means zero gradient for that leaf.
pub fn adam_step(
    params: &mut ModelParams<TensorData>,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    let leaves = {
        let mut n = 0usize;
        params.visit(&mut |_, _| n += 1);
        n
    };
    if grads.len() != leaves || state.m.len() != leaves {
        return Err(Error::Contract(format!(
            "adam_step alignment broken: {} leaves, {} grads, {} moment buffers",
            leaves,
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step;
    let mut idx = 0usize;
    let mut failure: Option<Error> = None;
    let updated = params.map_ref(&mut |name, w| {
        let i = idx;
        idx += 1;
        if failure.is_some() {
            return w.clone();
        }
        if grads[i].is_empty() {
            return w.clone(); // zero gradient: moments decay but w is
                              // untouched only when moments are also zero;
                              // keep the no-op contract exact by skipping.
        }
        if grads[i].len() != w.numel() {
            failure = Some(Error::Contract(format!(
                "gradient for {name} has {} elements, parameter has {}",
                grads[i].len(),
                w.numel()
            )));
            return w.clone();
        }
        if let Some(bad) = grads[i].iter().find(|g| !g.is_finite()) {
            failure = Some(Error::Numeric(format!(
                "non-finite gradient {bad} in {name}; aborting before the update"
            )));
            return w.clone();
        }
        let mut data = w.data().to_vec();
        update_leaf(
            &mut data,
            &grads[i],
            state.m[i].data_mut(),
            state.v[i].data_mut(),
            t,
            hyper,
        );
        TensorData::new(w.shape().to_vec(), data).expect("shape preserved")
    });
    if let Some(err) = failure {
        return Err(err);
    }
    *params = updated;
    Ok(())
}

/// The scalar update rule, shared by [`adam_step`] and its tests.
pub(crate) fn update_leaf(
    w: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    h: &AdamHyper,
) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..w.len() {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        w[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}
