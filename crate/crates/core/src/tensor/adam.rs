//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::graph::{Gradients, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every parameter that has a gradient. Parameters
    /// without a gradient this step keep their values and moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (id, g) in &grads.by_param {
            if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                return Err(Error::Numerics(format!(
                    "gradient of {} is {bad}",
                    store.name(*id)
                )));
            }
            if g.len() != store.get(*id).len() {
                return Err(Error::Shape {
                    op: "adam",
                    left: store.get(*id).shape,
                    right: [g.len(), 1],
                });
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut ids: Vec<_> = grads.by_param.keys().copied().collect();
        ids.sort();
        for id in ids {
            let g = &grads.by_param[&id];
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = &mut store.get_mut(id).values;
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
