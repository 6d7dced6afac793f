//! Adam with optional L2 weight decay per parameter block.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: store.zeros_like(), v: store.zeros_like(), step: 0 }
    }

    /// One update. `lr[k]` and `decay[k]` apply to block `k`; blocks with a
    /// zero learning rate are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: &[f64], decay: &[f64]) {
        assert_eq!(grads.len(), store.blocks.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, block) in store.blocks.iter_mut().enumerate() {
            if lr[k] == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            for (i, theta) in block.value.data.iter_mut().enumerate() {
                let g = grads[k].data[i] + decay[k] * *theta;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *theta -= lr[k] * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Group;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        store.push("a", Group::Vanilla, Tensor::row(&[1.0, -2.0]), false);
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[Tensor::row(&[0.5, -3.0])], &[0.1], &[0.0]);
        let d = &store.blocks[0].value.data;
        assert!((d[0] - 0.9).abs() < 1e-6 && (d[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let mut store = ParamStore::new();
        store.push("a", Group::Vanilla, Tensor::row(&[0.123456789, -2.0]), true);
        let before = store.clone();
        let mut adam = Adam::new(&store);
        adam.update(&mut store, &[Tensor::row(&[0.5, -3.0])], &[0.0], &[1e-6]);
        assert_eq!(store, before);
    }
}
