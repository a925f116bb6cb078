//! AdamW with decoupled weight decay.

use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state; moment tensors are kept in the order the parameters
/// are passed to [`AdamW::step`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(Tensor::zeros_like).collect();
        Self {
            config,
            v: m.clone(),
            m,
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: Vec<&Tensor<T>>, lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count differs");
        self.steps += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - c.beta2.powi(self.steps as i32);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step = T::of(lr / bc1);
        let bc2 = T::of(bc2);
        let eps = T::of(c.eps);
        let decay = T::of(1.0 - lr * c.weight_decay);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                *p = *p * decay - step * *m / ((*v / bc2).sqrt() + eps);
            }
        }
    }
}
