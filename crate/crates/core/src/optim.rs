//! First-order adaptive moment optimizer (Adam) over a [`ParamSet`].

use crate::autodiff::{ParamGrads, ParamSet};
use crate::tensor::Tensor;

pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, id) in params.ids().enumerate().map(|(i, id)| (i, id)).collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = params.get_mut(id).data_mut();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
