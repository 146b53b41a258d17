//! AdamW with decoupled weight decay.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientMap;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub weight_decay: f64,
    pub step: u64,
    pub ids: Vec<ParamId>,
    #[serde(skip)]
    pub m: Vec<Array2<f64>>,
    #[serde(skip)]
    pub v: Vec<Array2<f64>>,
}

impl AdamW {
    /// Zeroed slots for `ids`.
    pub fn new(store: &ParameterStore, ids: &[ParamId], weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = ids.iter().map(|&id| Array2::zeros(store.get(id).dim())).collect();
        Self {
            weight_decay,
            step: 0,
            ids: ids.to_vec(),
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every tracked parameter. Parameters missing from
    /// `grads` are treated as having zero gradient.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &GradientMap, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let decay = 1.0 - lr * self.weight_decay;
        for (k, &id) in self.ids.iter().enumerate() {
            let w = store.get_mut(id);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            if m.dim() != w.dim() {
                return Err(Error::shape("adamw slot", m.dim(), w.dim()));
            }
            let zero;
            let g = match grads.get(id) {
                Some(g) => g,
                None => {
                    zero = Array2::zeros(w.dim());
                    &zero
                }
            };
            if g.dim() != w.dim() {
                return Err(Error::shape("adamw grad", g.dim(), w.dim()));
            }
            Zip::from(w).and(m).and(v).and(g).for_each(|w, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w *= decay;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
            });
        }
        Ok(())
    }
}
