use ndarray::ArrayD;

use crate::params::{ParamId, ParamStore};
use crate::Real;

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    m: Vec<Option<ArrayD<T>>>,
    v: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Frozen parameters are skipped even if a gradient
    /// is supplied. Returns the pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, &ArrayD<T>)]) -> f64 {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let norm = grads
            .iter()
            .map(|(_, g)| g.iter().map(|&x| x.to_f64_lossy().powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let b1 = T::cast(self.beta1);
        let b2 = T::cast(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = T::cast(self.lr * bc2.sqrt() / bc1);
        let eps = T::cast(self.eps * bc2.sqrt());
        let clip = T::cast(clip);
        for &(id, g) in grads {
            if store.get(id).frozen {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[id.0].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let p = store.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * clip;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= step_size * *m / (v.sqrt() + eps);
                });
        }
        norm
    }
}
