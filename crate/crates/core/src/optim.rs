//! Adam with a step-wise halving schedule.

use crate::params::ParamStore;
use crate::tensor::ParamGrads;

/// `base · factor^⌊epoch / every⌋` with 0-based epochs.
pub fn scheduled_lr(base: f64, epoch: usize, every: usize, factor: f64) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let g = grads.get(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *p -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_halves_every_hundred() {
        assert_eq!(scheduled_lr(1e-4, 0, 100, 0.5), 1e-4);
        assert_eq!(scheduled_lr(1e-4, 99, 100, 0.5), 1e-4);
        assert_eq!(scheduled_lr(1e-4, 250, 100, 0.5), 1e-4 * 0.25);
    }

    #[test]
    fn matches_scalar_reference() {
        // f(p) = Σ (p_i - i)², 10 parameters
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_fn(&[10], |i| (i as f64 * 0.37).sin()));
        let mut adam = Adam::new(&store);
        let mut p_ref: Vec<f64> = store.get(id).data().to_vec();
        let (mut m, mut v) = (vec![0.0; 10], vec![0.0; 10]);
        for t in 1..=50 {
            let g: Vec<f64> = store.get(id).data().iter().enumerate().map(|(i, p)| 2.0 * (p - i as f64)).collect();
            adam.step(&mut store, &ParamGrads(vec![g]), 0.05);
            for i in 0..10 {
                let gi = 2.0 * (p_ref[i] - i as f64);
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                p_ref[i] -= 0.05 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for (a, b) in store.get(id).data().iter().zip(&p_ref) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
