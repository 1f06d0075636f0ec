//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Grads, ParamStore, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale gradients whose global norm exceeds this value.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            max_grad_norm: None,
        }
    }
}

impl AdamWConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                v.push(format!("optim.{name} {b} must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("optim.eps {} must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("optim.weight_decay {} must be non-negative", self.weight_decay));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                v.push(format!("optim.max_grad_norm {c} must be positive"));
            }
        }
        v
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
    pub cfg: AdamWConfig,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            cfg,
        }
    }
}

/// One AdamW update. Parameters without a gradient or marked frozen are left
/// untouched; weight decay applies only to parameters flagged for it.
///
/// The step is rejected, leaving every state unchanged, when any gradient is
/// non-finite.
pub fn adamw_step<T: Real>(store: &mut ParamStore<T>, grads: &Grads<T>, opt: &mut OptimState<T>, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::NonFinite(format!("learning rate {lr}")));
    }
    for (id, g) in grads.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(store.name(id).to_string()));
        }
        if g.shape() != store.get(id).shape() {
            return Err(Error::dim("adamw_step", format!("gradient {:?} for `{}`", g.shape(), store.name(id))));
        }
    }
    let clip = match opt.cfg.max_grad_norm {
        Some(c) => {
            let norm = grads.global_norm().as_f64();
            if norm > c {
                c / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    opt.step += 1;
    let c = opt.cfg;
    let t = opt.step as i32;
    let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
    let bc1 = T::of_f64(1.0 - c.beta1.powi(t));
    let bc2 = T::of_f64(1.0 - c.beta2.powi(t));
    let (lr_t, eps) = (T::of_f64(lr), T::of_f64(c.eps));
    let shrink = T::one() - T::of_f64(lr * c.weight_decay);
    let clip = T::of_f64(clip);
    for (id, g) in grads.iter() {
        let entry = store.entry(id);
        if !entry.trainable {
            continue;
        }
        let decay = entry.decay && c.weight_decay > 0.0;
        let i = id.index();
        let (m, v) = (opt.m[i].data_mut(), opt.v[i].data_mut());
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            let gk = g.data()[k] * clip;
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            if decay {
                p[k] = p[k] * shrink;
            }
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] = p[k] - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(v: f64, decay: bool) -> (ParamStore<f64>, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("w", Tensor::scalar(v), decay);
        (s, id)
    }

    fn grads_of(id: crate::numerics::ParamId, g: f64) -> Grads<f64> {
        let mut gr = Grads::empty(1);
        gr.set(id, Tensor::scalar(g));
        gr
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let (mut s, id) = scalar_store(0.7, true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = OptimState::new(&s, cfg);
        adamw_step(&mut s, &grads_of(id, 0.0), &mut opt, 0.1).unwrap();
        assert_eq!(s.get(id).data()[0], 0.7);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut s, id) = scalar_store(1.0, false);
        let mut opt = OptimState::new(&s, AdamWConfig::default());
        adamw_step(&mut s, &grads_of(id, 1.0), &mut opt, 1e-3).unwrap();
        let expect = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.get(id).data()[0] - expect).abs() < 1e-15);
    }

    /// Independent scalar AdamW, written out with explicit powers.
    fn reference(theta0: f64, lr: f64, wd: f64, grad: impl Fn(f64, usize) -> f64, steps: usize) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(th, t);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            th -= lr * wd * th;
            th -= lr * (m / (1.0 - b1.powi(t as i32))) / ((v / (1.0 - b2.powi(t as i32))).sqrt() + eps);
            out.push(th);
        }
        out
    }

    fn run(theta0: f64, lr: f64, wd: f64, grad: impl Fn(f64, usize) -> f64, steps: usize) -> Vec<f64> {
        let (mut s, id) = scalar_store(theta0, true);
        let cfg = AdamWConfig {
            weight_decay: wd,
            ..Default::default()
        };
        let mut opt = OptimState::new(&s, cfg);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = grad(s.get(id).data()[0], t);
            adamw_step(&mut s, &grads_of(id, g), &mut opt, lr).unwrap();
            out.push(s.get(id).data()[0]);
        }
        out
    }

    #[test]
    fn square_trajectory_matches_reference() {
        let a = run(3.0, 0.1, 0.0, |th, _| 2.0 * th, 5);
        let b = reference(3.0, 0.1, 0.0, |th, _| 2.0 * th, 5);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn random_gradients_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gs: Vec<f64> = (0..100).map(|_| rng.gen_range(-2.0..2.0)).collect();
        for wd in [0.0, 0.05] {
            let a = run(0.5, 3e-3, wd, |_, t| gs[t - 1], 100);
            let b = reference(0.5, 3e-3, wd, |_, t| gs[t - 1], 100);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decay_skips_unflagged_and_frozen() {
        let mut s = ParamStore::<f64>::new();
        let w = s.insert("w", Tensor::scalar(1.0), true);
        let b = s.insert("b", Tensor::scalar(1.0), false);
        let f = s.insert("f", Tensor::scalar(1.0), true);
        s.set_trainable(f, false);
        let mut g = Grads::empty(3);
        for id in [w, b, f] {
            g.set(id, Tensor::scalar(0.0));
        }
        let mut opt = OptimState::new(&s, AdamWConfig::default());
        adamw_step(&mut s, &g, &mut opt, 0.1).unwrap();
        assert!((s.get(w).data()[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-15);
        assert_eq!(s.get(b).data()[0], 1.0);
        assert_eq!(s.get(f).data()[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let (mut s, id) = scalar_store(1.0, true);
        let mut opt = OptimState::new(&s, AdamWConfig::default());
        let err = adamw_step(&mut s, &grads_of(id, f64::NAN), &mut opt, 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "w"));
        assert_eq!(opt.step, 0);
        assert_eq!(s.get(id).data()[0], 1.0);
    }

    #[test]
    fn clipping_bounds_the_first_moment() {
        let (mut s, id) = scalar_store(0.0, false);
        let cfg = AdamWConfig {
            max_grad_norm: Some(0.5),
            ..Default::default()
        };
        let mut opt = OptimState::new(&s, cfg);
        adamw_step(&mut s, &grads_of(id, 4.0), &mut opt, 0.1).unwrap();
        assert!((opt.m[0].data()[0] - 0.05).abs() < 1e-15);
    }
}
