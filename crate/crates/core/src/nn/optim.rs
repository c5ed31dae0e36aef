use alloc::vec::Vec;

use super::params::{EntryKind, Grads, ParamStore};
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// First-order optimizer over a [`ParamStore`]. Adam uses the PyTorch
/// defaults (β = 0.9 / 0.999, ε = 1e-8, no weight decay); SGD is plain.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64, store: &ParamStore<T>) -> Self {
        let zeros = |kind: OptimizerKind| -> Vec<Tensor<T>> {
            if kind != OptimizerKind::Adam {
                return Vec::new();
            }
            store
                .entries()
                .iter()
                .map(|e| match e.kind {
                    EntryKind::Param => Tensor::zeros(e.value.shape()),
                    EntryKind::Buffer => Tensor::zeros(&[0]),
                })
                .collect()
        };
        Self {
            kind,
            lr,
            step: 0,
            m: zeros(kind),
            v: zeros(kind),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>) {
        self.step += 1;
        let lr = T::of(self.lr);
        let ids: Vec<usize> = store
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == EntryKind::Param)
            .map(|(i, _)| i)
            .collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    let g = grads.tensors[id].data();
                    for (p, &gv) in store.get_mut(id).data_mut().iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = T::of(1.0 - libm::pow(BETA1, t as f64));
                let bc2 = T::of(1.0 - libm::pow(BETA2, t as f64));
                let (b1, b2, eps) = (T::of(BETA1), T::of(BETA2), T::of(EPS));
                let one = T::one();
                for id in ids {
                    let g = grads.tensors[id].data();
                    let m = self.m[id].data_mut();
                    let v = self.v[id].data_mut();
                    let p = store.get_mut(id).data_mut();
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (one - b1) * g[i];
                        v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}
