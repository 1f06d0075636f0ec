use crate::numerics::{ParamStore, Real, Tensor};

/// Exponential moving average of the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState<T> {
    pub shadow: Vec<Tensor<T>>,
    pub decay: f64,
}

impl<T: Real> EmaState<T> {
    pub fn new(store: &ParamStore<T>, decay: f64) -> Self {
        Self {
            shadow: store.entries().iter().map(|e| e.value.clone()).collect(),
            decay,
        }
    }

    /// `shadow ← μ·shadow + (1−μ)·params` for every trainable parameter.
    pub fn update(&mut self, store: &ParamStore<T>) {
        let mu = T::of_f64(self.decay);
        let one_minus = T::of_f64(1.0 - self.decay);
        for (s, e) in self.shadow.iter_mut().zip(store.entries()) {
            if !e.trainable {
                continue;
            }
            for (a, &p) in s.data_mut().iter_mut().zip(e.value.data()) {
                *a = mu * *a + one_minus * p;
            }
        }
    }

    /// Copy of `store` carrying the shadow values.
    pub fn apply(&self, store: &ParamStore<T>) -> ParamStore<T> {
        let mut out = store.clone();
        for (id, s) in store.ids().zip(&self.shadow) {
            *out.get_mut(id) = s.clone();
        }
        out
    }
}
