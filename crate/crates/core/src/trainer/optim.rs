use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::graph::{Grads, Group, ParamId, ParamStore, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam over the parameters of one [`Group`]. Moment buffers are indexed in
/// the order of [`ParamStore::ids_in`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub group: Group,
    pub lr: f64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
    /// Number of updates applied so far.
    pub t: u64,
}

/// Scalar summary used in checkpoint manifests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub group: Group,
    pub lr: f64,
    pub t: u64,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, group: Group, lr: f64) -> Self {
        let ids = store.ids_in(group);
        let zeros: Vec<Array2<F>> = ids.iter().map(|&id| Array2::zeros(store.value(id).dim())).collect();
        Self {
            group,
            lr,
            ids,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn meta(&self) -> AdamMeta {
        AdamMeta {
            group: self.group,
            lr: self.lr,
            t: self.t,
        }
    }

    /// One bias-corrected update. Parameters the loss did not reach keep
    /// their values and moments.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Grads<F>) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (F::from_f64(ADAM_BETA1), F::from_f64(ADAM_BETA2));
        let c1 = F::from_f64(1.0 - ADAM_BETA1.powi(t));
        let c2 = F::from_f64(1.0 - ADAM_BETA2.powi(t));
        let lr = F::from_f64(self.lr);
        let eps = F::from_f64(ADAM_EPS);
        let one = F::one();
        for (k, &id) in self.ids.iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(store.value_mut(id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mh = *m / c1;
                    let vh = *v / c2;
                    *p = *p - lr * mh / (vh.sqrt() + eps);
                });
        }
    }
}
