use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};

/// First and second moment estimates of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of updates this parameter has received.
    pub t: u64,
}

/// Bias-corrected Adam without weight decay.
///
/// Moments are tracked per parameter and only parameters holding a gradient
/// are updated, so experts skipped by a step keep their state untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: Vec<Option<AdamSlot>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            slots: Vec::new(),
        }
    }

    /// Applies one update with learning rate `lr` and clears the gradients.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.slots.len() < store.len() {
            self.slots.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let param = store.get_mut(id);
            let Some(grad) = param.grad.take() else { continue };
            let n = grad.numel();
            let slot = self.slots[id.index()].get_or_insert_with(|| AdamSlot {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            });
            if slot.m.len() != n {
                return Err(Error::Shape {
                    op: "adam",
                    lhs: vec![slot.m.len()],
                    rhs: vec![n],
                });
            }
            slot.t += 1;
            let c1 = 1.0 - self.beta1.powi(slot.t as i32);
            let c2 = 1.0 - self.beta2.powi(slot.t as i32);
            let values = param.value.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = slot.m[i] / c1;
                let v_hat = slot.v[i] / c2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
