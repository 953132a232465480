use std::collections::HashMap;

use super::{ParamStore, Real, Tensor};

/// Adaptive-moment descent with global gradient-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    step: u64,
    moments: HashMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(clip: Option<f64>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, step: 0, moments: HashMap::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies accumulated gradients and returns the pre-clip gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> f64 {
        self.step_scaled(store, lr, |_| 1.0)
    }

    /// As [`Adam::step`], with the learning rate of parameter `id` multiplied
    /// by `lr_scale(id)`.
    pub fn step_scaled(&mut self, store: &mut ParamStore<T>, lr: f64, lr_scale: impl Fn(&str) -> f64) -> f64 {
        let norm = store.grad_norm().as_f64();
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let (sbc2, eps, sc) = (T::lit(bc2.sqrt()), T::lit(self.eps), T::lit(scale));
        for (id, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let step_size = T::lit(lr * lr_scale(id) / bc1);
            let (m, v) = self
                .moments
                .entry(id.clone())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let vals = p.value.data_mut();
            for (i, &gr) in p.grad.data().iter().enumerate() {
                let gr = gr * sc;
                let mi = b1 * m.data()[i] + ob1 * gr;
                let vi = b2 * v.data()[i] + ob2 * gr * gr;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                vals[i] = vals[i] - step_size * mi / (vi.sqrt() / sbc2 + eps);
            }
        }
        norm
    }
}

/// Cosine decay from `base` to zero over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}
