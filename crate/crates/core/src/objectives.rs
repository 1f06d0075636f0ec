//! Regression, depth, segmentation and weighted multi-task losses.
//!
//! Each loss has a tape form for training and a plain form for evaluation.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Weight on the task loss.
    pub alpha: f64,
    /// Weight on the autoregressive loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            v.push(format!("loss alpha {} must be a finite non-negative number", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            v.push(format!("loss beta {} must be a finite non-negative number", self.beta));
        }
        if v.is_empty() && self.alpha + self.beta <= 0.0 {
            v.push("loss alpha and beta cannot both be zero".into());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    /// Positions that contributed to the loss.
    pub count: usize,
}

fn check_pair<T: Real>(op: &'static str, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(op, format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    Ok(())
}

fn scored_rows(scored: &[bool], rows: usize) -> Result<Arc<Vec<usize>>> {
    if scored.len() != rows {
        return Err(Error::dim("ar_loss", format!("{} score flags for {rows} units", scored.len())));
    }
    let idx: Vec<usize> = (0..rows).filter(|&i| scored[i]).collect();
    if idx.is_empty() {
        return Err(Error::EmptyLoss);
    }
    Ok(Arc::new(idx))
}

/// Mean squared error over the units (rows) flagged in `scored`.
pub fn ar_loss_on_tape<T: Real>(tape: &mut Tape<T>, preds: Var, targets: &Tensor<T>, scored: &[bool]) -> Result<Var> {
    check_pair("ar_loss", tape.value(preds), targets)?;
    let idx = scored_rows(scored, targets.rows())?;
    let p = if idx.len() == targets.rows() {
        preds
    } else {
        tape.gather_rows(preds, idx.clone())?
    };
    let mut sel = Vec::with_capacity(idx.len() * targets.cols());
    for &i in idx.iter() {
        sel.extend_from_slice(targets.row(i));
    }
    let t = tape.input(Tensor::matrix(idx.len(), targets.cols(), sel)?);
    let diff = tape.sub(p, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

pub fn ar_loss<T: Real>(preds: &Tensor<T>, targets: &Tensor<T>, scored: &[bool]) -> Result<T> {
    check_pair("ar_loss", preds, targets)?;
    let idx = scored_rows(scored, targets.rows())?;
    let mut acc = T::zero();
    for &i in idx.iter() {
        for (&a, &b) in preds.row(i).iter().zip(targets.row(i)) {
            acc = acc + (a - b) * (a - b);
        }
    }
    Ok(acc / T::from_usize(idx.len() * targets.cols()).unwrap())
}

/// Mean per-pixel squared error.
pub fn depth_loss_on_tape<T: Real>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    check_pair("depth_loss", tape.value(pred), target)?;
    let t = tape.input(target.clone());
    let diff = tape.sub(pred, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

pub fn depth_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    check_pair("depth_loss", pred, target)?;
    let sum = pred
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(sum / T::from_usize(pred.len()).unwrap())
}

/// Mean per-pixel softmax cross-entropy; `logits` is `pixels × K`.
pub fn seg_loss_on_tape<T: Real>(tape: &mut Tape<T>, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

pub fn seg_loss<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let k = logits.cols();
    if labels.len() != logits.rows() {
        return Err(Error::dim("seg_loss", format!("{} labels for {} pixels", labels.len(), logits.rows())));
    }
    let mut acc = T::zero();
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::Label { label: l, classes: k });
        }
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        acc = acc + lse - row[l];
    }
    Ok(acc / T::from_usize(labels.len()).unwrap())
}

/// `α·task + β·ar` with named components.
pub fn multitask_loss(task_name: &str, task: f64, ar: f64, w: LossWeights, count: usize) -> Result<LossReport> {
    if !task.is_finite() || !ar.is_finite() {
        return Err(Error::NonFinite(format!("multitask loss input ({task_name}={task}, ar={ar})")));
    }
    let mut components = BTreeMap::new();
    components.insert(task_name.to_string(), task);
    components.insert("ar".to_string(), ar);
    Ok(LossReport {
        total: w.alpha * task + w.beta * ar,
        components,
        count,
    })
}

pub fn multitask_on_tape<T: Real>(tape: &mut Tape<T>, task: Var, ar: Var, w: LossWeights) -> Result<Var> {
    let a = tape.scale(task, T::of_f64(w.alpha));
    let b = tape.scale(ar, T::of_f64(w.beta));
    tape.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn ar_examples() {
        let t = rand_tensor(&[5, 3], 0);
        let all = [true; 5];
        assert_eq!(ar_loss(&t, &t, &all).unwrap(), 0.0);
        let shifted = t.map(|v| v + 1.0);
        assert!((ar_loss(&shifted, &t, &all).unwrap() - 1.0).abs() < 1e-12);

        let p = Tensor::<f64>::matrix(3, 1, vec![1.0, 2.0, 4.0]).unwrap();
        let y = Tensor::matrix(3, 1, vec![0.0, 2.5, 1.0]).unwrap();
        assert!((ar_loss(&p, &y, &[true; 3]).unwrap() - (1.0 + 0.25 + 9.0) / 3.0).abs() < 1e-15);
        assert!((ar_loss(&p, &y, &[true, false, true]).unwrap() - 5.0).abs() < 1e-15);
        assert!(matches!(ar_loss(&p, &y, &[false; 3]), Err(Error::EmptyLoss)));
        assert!(ar_loss(&p, &y, &[true; 2]).is_err());
    }

    #[test]
    fn ar_tape_matches_plain() {
        let p = rand_tensor(&[6, 4], 1);
        let y = rand_tensor(&[6, 4], 2);
        let scored = [true, false, false, true, true, false];
        let mut tape = Tape::new();
        let pv = tape.input(p.clone());
        let l = ar_loss_on_tape(&mut tape, pv, &y, &scored).unwrap();
        assert!((tape.value(l).data()[0] - ar_loss(&p, &y, &scored).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn depth_examples() {
        let a = rand_tensor(&[1, 4, 4], 3);
        assert_eq!(depth_loss(&a, &a).unwrap(), 0.0);
        let x = Tensor::full(&[2, 2], 1.0);
        let y = Tensor::full(&[2, 2], 3.0);
        assert_eq!(depth_loss(&x, &y).unwrap(), 4.0);
        let b = rand_tensor(&[1, 4, 4], 4);
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                oracle += (a.at(&[0, i, j]) - b.at(&[0, i, j])).powi(2);
            }
        }
        assert_eq!(depth_loss(&a, &b).unwrap(), oracle / 16.0);
        assert!(depth_loss(&a, &x).is_err());
    }

    #[test]
    fn seg_examples() {
        let uniform = Tensor::<f64>::zeros(&[4, 4]);
        assert!((seg_loss(&uniform, &[0, 1, 2, 3]).unwrap() - 4f64.ln()).abs() < 1e-12);
        let confident = Tensor::<f64>::matrix(1, 3, vec![0.0, 60.0, 0.0]).unwrap();
        assert!(seg_loss(&confident, &[1]).unwrap() < 1e-20);
        assert!(matches!(seg_loss(&confident, &[3]), Err(Error::Label { label: 3, classes: 3 })));

        let logits = rand_tensor(&[4, 3], 5);
        let labels = [2, 0, 1, 1];
        let mut oracle = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let e: Vec<f64> = logits.row(i).iter().map(|v| v.exp()).collect();
            oracle -= (e[l] / e.iter().sum::<f64>()).ln();
        }
        assert!((seg_loss(&logits, &labels).unwrap() - oracle / 4.0).abs() < 1e-12);
        let mut tape = Tape::new();
        let lv = tape.input(logits.clone());
        let l = seg_loss_on_tape(&mut tape, lv, Arc::new(labels.to_vec())).unwrap();
        assert!((tape.value(l).data()[0] - oracle / 4.0).abs() < 1e-12);
    }

    #[test]
    fn multitask_examples() {
        let w = |alpha, beta| LossWeights { alpha, beta };
        assert_eq!(multitask_loss("depth", 7.0, 3.0, w(0.0, 2.0), 1).unwrap().total, 6.0);
        assert_eq!(multitask_loss("depth", 2.0, 3.0, w(1.0, 1.0), 1).unwrap().total, 5.0);
        let r = multitask_loss("seg", 1.2, 0.8, w(0.5, 1.5), 4).unwrap();
        assert!((r.total - 1.8).abs() < 1e-12);
        assert_eq!(r.components["seg"], 1.2);
        assert_eq!(r.components["ar"], 0.8);
        assert!(multitask_loss("seg", f64::NAN, 0.8, w(1.0, 1.0), 1).is_err());
        assert_eq!(w(0.0, 0.0).violations().len(), 1);
        assert_eq!(w(-1.0, f64::INFINITY).violations().len(), 2);
        assert!(LossWeights::default().violations().is_empty());
    }

    #[test]
    fn loss_gradients_pass_finite_differences() {
        let mut store = ParamStore::new();
        let p = store.insert("preds", rand_tensor(&[5, 3], 6), false);
        let d = store.insert("depth", rand_tensor(&[4, 4], 7), false);
        let s = store.insert("seg", rand_tensor(&[6, 3], 8), false);
        let (y, dt) = (rand_tensor(&[5, 3], 9), rand_tensor(&[4, 4], 10));
        let report = grad_check(
            |tape, st| {
                let pv = tape.param(st, p);
                let ar = ar_loss_on_tape(tape, pv, &y, &[true, false, true, true, false])?;
                let dv = tape.param(st, d);
                let dl = depth_loss_on_tape(tape, dv, &dt)?;
                let sv = tape.param(st, s);
                let sl = seg_loss_on_tape(tape, sv, Arc::new(vec![0, 1, 2, 2, 1, 0]))?;
                let task = tape.add(dl, sl)?;
                multitask_on_tape(tape, task, ar, LossWeights { alpha: 0.7, beta: 1.3 })
            },
            &store,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    proptest! {
        #[test]
        fn ar_is_permutation_equivariant(seed in any::<u64>(), rot in 0usize..6) {
            let p = rand_tensor(&[6, 2], seed);
            let y = rand_tensor(&[6, 2], seed ^ 1);
            let scored = [true, true, false, true, false, true];
            let order: Vec<usize> = (0..6).map(|i| (i + rot) % 6).collect();
            let pick = |t: &Tensor<f64>| {
                Tensor::matrix(6, 2, order.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap()
            };
            let s2: Vec<bool> = order.iter().map(|&i| scored[i]).collect();
            let a = ar_loss(&p, &y, &scored).unwrap();
            let b = ar_loss(&pick(&p), &pick(&y), &s2).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a > 0.0);
        }

        #[test]
        fn losses_are_nonnegative(seed in any::<u64>()) {
            let a = rand_tensor(&[3, 4], seed);
            let b = rand_tensor(&[3, 4], seed.wrapping_add(1));
            prop_assert!(depth_loss(&a, &b).unwrap() >= 0.0);
            prop_assert!(seg_loss(&a, &[0, 3, 1]).unwrap() >= 0.0);
            prop_assert!(ar_loss(&a, &b, &[true; 3]).unwrap() >= 0.0);
        }

        #[test]
        fn weight_scaling_keeps_gradient_direction(c in 0.1f64..10.0, seed in any::<u64>()) {
            let mut store = ParamStore::new();
            let p = store.insert("p", rand_tensor(&[4, 2], seed), false);
            let (y, z) = (rand_tensor(&[4, 2], seed ^ 2), rand_tensor(&[4, 2], seed ^ 3));
            let grad = |w: LossWeights| {
                let mut tape = Tape::new();
                let pv = tape.param(&store, p);
                let ar = ar_loss_on_tape(&mut tape, pv, &y, &[true; 4]).unwrap();
                let task = depth_loss_on_tape(&mut tape, pv, &z).unwrap();
                let l = multitask_on_tape(&mut tape, task, ar, w).unwrap();
                let total = tape.value(l).data()[0];
                let g = tape.backward(l, store.len()).unwrap();
                let g = g.get(p).unwrap().clone();
                let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
                (total, g.map(|v| v / norm))
            };
            let (t1, g1) = grad(LossWeights { alpha: 0.6, beta: 1.1 });
            let (t2, g2) = grad(LossWeights { alpha: 0.6 * c, beta: 1.1 * c });
            prop_assert!((t2 - c * t1).abs() < 1e-9 * t2.abs().max(1.0));
            prop_assert!(g1.max_abs_diff(&g2) < 1e-6);
        }
    }
}
