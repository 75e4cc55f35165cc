use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
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
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Restores a saved optimizer state.
    pub fn from_state(step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    /// One update of every parameter. Missing gradients count as zero.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &[Option<Tensor>],
        lr: f64,
    ) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(alloc::format!(
                "optimizer tracks {} tensors, store has {}, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let g = grads[k].as_ref().map(Tensor::data);
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    fn quadratic_store(w: f64) -> ParamStore {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(w)).unwrap();
        store
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut store = quadratic_store(1.5);
        let mut adam = Adam::new(&store);
        let zero = vec![Some(Tensor::scalar(0.0))];
        for _ in 0..5 {
            adam.step(&mut store, &zero, 0.1).unwrap();
        }
        assert_eq!(store.get(store.id("w").unwrap()).item(), 1.5);
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut store = quadratic_store(1.0);
        let mut adam = Adam::new(&store);
        let id = store.id("w").unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let loss = g.mul(w, w).unwrap();
        g.backward(loss).unwrap();
        let grads = g.param_grads(&store);
        adam.step(&mut store, &grads, 0.1).unwrap();
        assert!(store.get(id).item() < 1.0);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        // f(w) = Σ cᵢ (wᵢ − tᵢ)², minimum 0 at w = t.
        let c = [1.0, 4.0, 0.5];
        let target = [0.3, -1.2, 2.0];
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::zeros(&[3])).unwrap();
        let mut adam = Adam::new(&store);
        let loss_at = |w: &[f64]| -> f64 {
            w.iter().zip(&c).zip(&target).map(|((w, c), t)| c * (w - t) * (w - t)).sum()
        };
        for step in 0..200 {
            let w = store.get(id).data().to_vec();
            let grad: Vec<f64> = w
                .iter()
                .zip(&c)
                .zip(&target)
                .map(|((w, c), t)| 2.0 * c * (w - t))
                .collect();
            let lr = 0.1 * (1.0 - step as f64 / 200.0);
            adam.step(&mut store, &[Some(Tensor::new(&[3], grad).unwrap())], lr)
                .unwrap();
        }
        assert!(loss_at(store.get(id).data()) < 1e-6);
    }
}
