use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct Parameter<T: Real> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

/// Named parameters in insertion order; ids are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real> {
    params: IndexMap<String, Parameter<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor<T>) {
        let id = id.into();
        let grad = Tensor::zeros(value.shape());
        let prev = self.params.insert(id.clone(), Parameter { value, grad, trainable: true });
        assert!(prev.is_none(), "duplicate parameter id `{id}`");
    }

    pub fn get(&self, id: &str) -> Option<&Parameter<T>> {
        self.params.get(id)
    }

    pub fn get_mut(&mut self, id: &str) -> Option<&mut Parameter<T>> {
        self.params.get_mut(id)
    }

    pub fn value(&self, id: &str) -> &Tensor<T> {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: &str) -> &mut Tensor<T> {
        &mut self.params.get_mut(id).unwrap_or_else(|| panic!("unknown parameter `{id}`")).value
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for (k, p) in self.params.iter_mut() {
            if k.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Parameter<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Parameter<T>)> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.grad.sq_norm())
            .fold(T::zero(), |a, b| a + b)
            .sqrt()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (k.clone(), Parameter { value: p.value.cast(), grad: p.grad.cast(), trainable: p.trainable })
                })
                .collect(),
        }
    }

    /// Sets every parameter whose id matches `pred` to zero.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (k, p) in self.params.iter_mut() {
            if pred(k) {
                p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}

/// Uniform fan-in initialisation, `U(-b, b)` with `b = gain / sqrt(fan_in)`.
pub fn uniform_init<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let bound = gain / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)))
}
