use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Plain SGD or Adam with bias-corrected moment estimates.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.values().iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            kind,
            lr,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        for (k, (p, g)) in store.values_mut().iter_mut().zip(grads).enumerate() {
            let data = p.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, gi) in data.iter_mut().zip(g.data()) {
                        *x -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for i in 0..data.len() {
                        let gi = g.data()[i];
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                        let mh = m[i] / bc1;
                        let vh = v[i] / bc2;
                        data[i] -= self.lr * mh / (vh.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -1.0]));
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &store);
        opt.step(&mut store, &[Tensor::vector(vec![2.0, -2.0])]);
        assert_eq!(store.values()[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.0, 0.0]));
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &store);
        opt.step(&mut store, &[Tensor::vector(vec![3.0, -0.01])]);
        let d = store.values()[0].data();
        assert!((d[0] + 0.1).abs() < 1e-6 && (d[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn zero_gradient_leaves_adam_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.25, -3.5]));
        let before = store.clone();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &store);
        opt.step(&mut store, &[Tensor::vector(vec![0.0, 0.0])]);
        assert_eq!(store, before);
    }
}
