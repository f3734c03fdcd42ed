use serde::{Deserialize, Serialize};

use crate::decoder::{Gradients, Parameters};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Decoupled weight decay.
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: default_beta1(), beta2: default_beta2(), eps: default_eps(), weight_decay: 0.0 }
    }
}

/// Adam moments for every slot that has a gradient buffer.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    moments: Vec<Option<(Matrix<T>, Matrix<T>)>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &Parameters<T>) -> Self {
        Self { cfg, moments: vec![None; params.len()], t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of the tensors present in `grads`; all others stay untouched.
    pub fn step(&mut self, params: &mut Parameters<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t));
        let (eps, lr, wd) = (T::of(c.eps), T::of(lr), T::of(c.weight_decay));
        let one = T::one();
        for (slot, g) in grads.iter() {
            let (m, v) = self.moments[slot].get_or_insert_with(|| {
                (Matrix::zeros(g.rows(), g.cols()), Matrix::zeros(g.rows(), g.cols()))
            });
            let p = params.tensor_mut(slot);
            let it = p.as_mut_slice().iter_mut().zip(m.as_mut_slice()).zip(v.as_mut_slice()).zip(g.as_slice());
            for (((p, m), v), &g) in it {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps) + wd * *p;
                *p -= lr * update;
            }
        }
    }
}

/// Linear warmup then cosine decay to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = (step - warmup) as f64 / span as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100, 0), 0.1);
        assert!((cosine_lr(0.1, 50, 100, 0) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 99, 100, 0) < 1e-4);
        assert!((cosine_lr(0.1, 0, 100, 10) - 0.01).abs() < 1e-12);
        assert_eq!(cosine_lr(0.1, 10, 100, 10), 0.1);
    }
}
