use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Zeroed moments shaped like every parameter in `store`.
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Array2<f64>> = store
            .iter()
            .map(|(_, p)| Array2::zeros(p.value.dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update. Parameters without a gradient entry are
    /// treated as having zero gradient; frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Array2<f64>)], lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if store.get(id).frozen {
                continue;
            }
            let i = id.index();
            let grad = grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let param = store.value_mut(id);
            match grad {
                Some(g) => {
                    ndarray::Zip::from(param)
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = b1 * *m + (1.0 - b1) * g;
                            *v = b2 * *v + (1.0 - b2) * g * g;
                            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                        });
                }
                None => {
                    ndarray::Zip::from(param).and(m).and(v).for_each(|p, m, v| {
                        *m *= b1;
                        *v *= b2;
                        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    });
                }
            }
        }
    }
}
