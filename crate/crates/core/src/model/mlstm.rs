//! mLSTM block: matrix memory with a covariance update and exponential
//! input gating, stabilized in log space.
//!
//! Per head, with `k` pre-scaled by `1/sqrt(d)`:
//!
//! ```text
//! m_t = max(log f_t + m_{t-1}, i~_t)
//! C_t = exp(log f_t + m_{t-1} - m_t) C_{t-1} + exp(i~_t - m_t) v_t k_tᵀ
//! n_t = exp(log f_t + m_{t-1} - m_t) n_{t-1} + exp(i~_t - m_t) k_t
//! h_t = C_t q_t / max(|n_tᵀ q_t|, exp(-m_t))
//! ```
//!
//! `h_t` equals the unstabilized recurrence for any sequence `m`, so the
//! backward pass treats `m` as a constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ops::{log_sigmoid, sigmoid};
use crate::numerics::{CustomOp, ParamStore, Real, Tape, Tensor, Var};

use super::decoder::{Linear, Norm};
use super::init::Init;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ForgetGate {
    #[default]
    Sigmoid,
    Exp,
}

impl ForgetGate {
    #[inline]
    fn log_f<T: Real>(self, pre: T) -> T {
        match self {
            ForgetGate::Sigmoid => log_sigmoid(pre),
            ForgetGate::Exp => pre,
        }
    }

    /// d log f / d pre.
    #[inline]
    fn dlog_f<T: Real>(self, pre: T) -> T {
        match self {
            ForgetGate::Sigmoid => sigmoid(-pre),
            ForgetGate::Exp => T::one(),
        }
    }
}

/// Parameter handles of one mLSTM block.
#[derive(Debug, Clone)]
pub struct MlstmParams {
    pub norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub igate: Linear,
    pub fgate: Linear,
    pub head_norm: Norm,
    pub out: Linear,
    pub dim: usize,
    pub heads: usize,
    pub gate: ForgetGate,
    pub eps: f64,
}

impl MlstmParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        dim: usize,
        heads: usize,
        gate: ForgetGate,
        eps: f64,
    ) -> Self {
        let norm = Norm::init(store, &format!("{prefix}.norm"), dim);
        let q = Linear::init(store, init, &format!("{prefix}.q"), dim, dim);
        let k = Linear::init(store, init, &format!("{prefix}.k"), dim, dim);
        let v = Linear::init(store, init, &format!("{prefix}.v"), dim, dim);
        let igate = Linear {
            w: store.insert(format!("{prefix}.igate.w"), init.uniform(&[dim, heads], 0.01), true),
            b: store.insert(format!("{prefix}.igate.b"), Tensor::zeros(&[heads]), false),
        };
        // Forget-gate biases spread over [3, 6] so memories start long-lived.
        let fgate = Linear {
            w: store.insert(format!("{prefix}.fgate.w"), init.uniform(&[dim, heads], 0.01), true),
            b: store.insert(
                format!("{prefix}.fgate.b"),
                Tensor::from_fn(&[heads], |h| {
                    let frac = if heads > 1 { h as f64 / (heads - 1) as f64 } else { 0.0 };
                    T::of_f64(3.0 + 3.0 * frac)
                }),
                false,
            ),
        };
        let head_norm = Norm::init(store, &format!("{prefix}.head_norm"), dim);
        let out = Linear::init(store, init, &format!("{prefix}.out"), dim, dim);
        Self {
            norm,
            q,
            k,
            v,
            igate,
            fgate,
            head_norm,
            out,
            dim,
            heads,
            gate,
            eps,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Recurrent state of every head.
#[derive(Debug, Clone, PartialEq)]
pub struct MlstmState<T> {
    /// `heads × d × d` matrix memories, row index over value dims.
    pub c: Vec<T>,
    /// `heads × d` normalizers.
    pub n: Vec<T>,
    /// Per-head log-scale stabilizers.
    pub m: Vec<T>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<T: Real> MlstmState<T> {
    pub fn zeros(heads: usize, head_dim: usize) -> Self {
        Self {
            c: vec![T::zero(); heads * head_dim * head_dim],
            n: vec![T::zero(); heads * head_dim],
            m: vec![T::zero(); heads],
            heads,
            head_dim,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().chain(&self.n).chain(&self.m).all(|v| v.is_finite())
    }
}

/// Advances the state by one token for every head and writes the normalized
/// readout `h` (heads concatenated, length `heads·d`).
///
/// `k` must already carry the `1/sqrt(d)` scale. Returns per-head
/// `(a, b, s, den)` for the backward pass.
#[allow(clippy::too_many_arguments)]
fn recurrence_step<T: Real>(
    state: &mut MlstmState<T>,
    q: &[T],
    k: &[T],
    v: &[T],
    ig: &[T],
    fg: &[T],
    gate: ForgetGate,
    h_out: &mut [T],
    mut record: impl FnMut(usize, T, T, T, T),
) {
    let d = state.head_dim;
    for hd in 0..state.heads {
        let (q, k, v) = (&q[hd * d..(hd + 1) * d], &k[hd * d..(hd + 1) * d], &v[hd * d..(hd + 1) * d]);
        let m_prev = state.m[hd];
        let lf = gate.log_f(fg[hd]);
        let m = (lf + m_prev).max(ig[hd]);
        let a = (lf + m_prev - m).exp();
        let b = (ig[hd] - m).exp();
        state.m[hd] = m;
        let c = &mut state.c[hd * d * d..(hd + 1) * d * d];
        let n = &mut state.n[hd * d..(hd + 1) * d];
        for i in 0..d {
            let bv = b * v[i];
            let row = &mut c[i * d..(i + 1) * d];
            for (cij, &kj) in row.iter_mut().zip(k) {
                *cij = a * *cij + bv * kj;
            }
        }
        for (nj, &kj) in n.iter_mut().zip(k) {
            *nj = a * *nj + b * kj;
        }
        let s: T = n.iter().zip(q).map(|(&x, &y)| x * y).sum();
        let den = s.abs().max((-m).exp());
        let h = &mut h_out[hd * d..(hd + 1) * d];
        for i in 0..d {
            let num: T = c[i * d..(i + 1) * d].iter().zip(q).map(|(&x, &y)| x * y).sum();
            h[i] = num / den;
        }
        record(hd, a, b, s, den);
    }
}

/// Sequential scan over `T` tokens as one tape primitive.
///
/// Inputs: `q`, `k`, `v` (`T × heads·d`), input and forget gate
/// pre-activations (`T × heads`). Output: `T × heads·d`.
struct MlstmScan<T> {
    heads: usize,
    head_dim: usize,
    gate: ForgetGate,
    /// `(T+1) × heads·d·d`; slot 0 is the zero initial state.
    cs: Vec<T>,
    /// `(T+1) × heads·d`.
    ns: Vec<T>,
    /// `T × heads` each.
    a: Vec<T>,
    b: Vec<T>,
    s: Vec<T>,
    den: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn scan_on_tape<T: Real>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    ig: Var,
    fg: Var,
    heads: usize,
    gate: ForgetGate,
) -> Result<Var> {
    let (steps, dim) = (tape.value(q).rows(), tape.value(q).cols());
    for x in [k, v] {
        if tape.value(x).shape() != tape.value(q).shape() {
            return Err(Error::dim("mlstm scan", "q/k/v shapes differ"));
        }
    }
    for x in [ig, fg] {
        if tape.value(x).rows() != steps || tape.value(x).cols() != heads {
            return Err(Error::dim("mlstm scan", "gate shapes differ"));
        }
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::dim("mlstm scan", format!("{dim} not divisible by {heads} heads")));
    }
    let d = dim / heads;
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut state = MlstmState::zeros(heads, d);
    let mut op = MlstmScan {
        heads,
        head_dim: d,
        gate,
        cs: Vec::with_capacity((steps + 1) * heads * d * d),
        ns: Vec::with_capacity((steps + 1) * heads * d),
        a: vec![T::zero(); steps * heads],
        b: vec![T::zero(); steps * heads],
        s: vec![T::zero(); steps * heads],
        den: vec![T::zero(); steps * heads],
    };
    op.cs.extend_from_slice(&state.c);
    op.ns.extend_from_slice(&state.n);
    let mut out = vec![T::zero(); steps * dim];
    let mut ks = vec![T::zero(); dim];
    {
        let (qv, kv, vv, iv, fv) = (
            tape.value(q),
            tape.value(k),
            tape.value(v),
            tape.value(ig),
            tape.value(fg),
        );
        for t in 0..steps {
            for (dst, &src) in ks.iter_mut().zip(kv.row(t)) {
                *dst = src * scale;
            }
            let (a, b, s, den) = (&mut op.a, &mut op.b, &mut op.s, &mut op.den);
            recurrence_step(
                &mut state,
                qv.row(t),
                &ks,
                vv.row(t),
                iv.row(t),
                fv.row(t),
                gate,
                &mut out[t * dim..(t + 1) * dim],
                |hd, av, bv, sv, dv| {
                    a[t * heads + hd] = av;
                    b[t * heads + hd] = bv;
                    s[t * heads + hd] = sv;
                    den[t * heads + hd] = dv;
                },
            );
            if !out[t * dim..(t + 1) * dim].iter().all(|x| x.is_finite())
                || !state.m.iter().all(|x| x.is_finite())
            {
                return Err(Error::Numerical { step: t });
            }
            op.cs.extend_from_slice(&state.c);
            op.ns.extend_from_slice(&state.n);
        }
    }
    let value = Tensor::matrix(steps, dim, out)?;
    Ok(tape.custom(vec![q, k, v, ig, fg], value, Box::new(op)))
}

/// Tape-free sequential scan: normalized readouts `T × heads·d` for
/// projected `q`, `k`, `v` (`T × heads·d`) and gate pre-activations
/// (`T × heads`). `k` is scaled by `1/sqrt(d)` internally.
pub fn mlstm_scan<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    ig: &Tensor<T>,
    fg: &Tensor<T>,
    heads: usize,
    gate: ForgetGate,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let vars = [q, k, v, ig, fg].map(|t| tape.input(t.clone()));
    let h = scan_on_tape(&mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], heads, gate)?;
    Ok(tape.value(h).clone())
}

impl<T: Real> CustomOp<T> for MlstmScan<T> {
    fn name(&self) -> &'static str {
        "mlstm_scan"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>> {
        let (q, k, v, ig, fg) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let (heads, d) = (self.heads, self.head_dim);
        let dim = heads * d;
        let steps = q.rows();
        let scale = T::one() / T::from_usize(d).unwrap().sqrt();
        let mut dq = vec![T::zero(); steps * dim];
        let mut dk = vec![T::zero(); steps * dim];
        let mut dv = vec![T::zero(); steps * dim];
        let mut dig = vec![T::zero(); steps * heads];
        let mut dfg = vec![T::zero(); steps * heads];
        let mut dc = vec![T::zero(); d * d];
        let mut dn = vec![T::zero(); d];
        let mut dnum = vec![T::zero(); d];
        let (hcs, hns) = (heads * d * d, heads * d);

        for hd in 0..heads {
            dc.iter_mut().for_each(|x| *x = T::zero());
            dn.iter_mut().for_each(|x| *x = T::zero());
            for t in (0..steps).rev() {
                let ix = t * heads + hd;
                let (a, b, s, den) = (self.a[ix], self.b[ix], self.s[ix], self.den[ix]);
                let row = t * dim + hd * d;
                let qt = &q.data()[row..row + d];
                let vt = &v.data()[row..row + d];
                let kt = &k.data()[row..row + d];
                let gh = &grad.data()[row..row + d];
                let ht = &output.data()[row..row + d];
                let c_t = &self.cs[(t + 1) * hcs + hd * d * d..(t + 1) * hcs + (hd + 1) * d * d];
                let c_prev = &self.cs[t * hcs + hd * d * d..t * hcs + (hd + 1) * d * d];
                let n_t = &self.ns[(t + 1) * hns + hd * d..(t + 1) * hns + (hd + 1) * d];
                let n_prev = &self.ns[t * hns + hd * d..t * hns + (hd + 1) * d];

                // readout h = C q / den
                let inv = T::one() / den;
                let mut dden = T::zero();
                for i in 0..d {
                    dnum[i] = gh[i] * inv;
                    dden = dden - gh[i] * ht[i] * inv;
                }
                // den = |s| unless the exp(-m) floor is active
                let ds = if s.abs() >= den && s != T::zero() {
                    dden * s.signum()
                } else {
                    T::zero()
                };
                let dqt = &mut dq[row..row + d];
                for i in 0..d {
                    let crow = &c_t[i * d..(i + 1) * d];
                    let dcrow = &mut dc[i * d..(i + 1) * d];
                    for j in 0..d {
                        dcrow[j] = dcrow[j] + dnum[i] * qt[j];
                        dqt[j] = dqt[j] + crow[j] * dnum[i];
                    }
                }
                for j in 0..d {
                    dqt[j] = dqt[j] + ds * n_t[j];
                    dn[j] = dn[j] + ds * qt[j];
                }

                // update C_t = a C_{t-1} + b v k̂ᵀ, n_t = a n_{t-1} + b k̂
                let mut da = T::zero();
                let mut db = T::zero();
                let dvt = &mut dv[row..row + d];
                let dkt = &mut dk[row..row + d];
                for i in 0..d {
                    let dcrow = &dc[i * d..(i + 1) * d];
                    let cprow = &c_prev[i * d..(i + 1) * d];
                    let mut dc_khat = T::zero();
                    for j in 0..d {
                        da = da + dcrow[j] * cprow[j];
                        let khat = kt[j] * scale;
                        dc_khat = dc_khat + dcrow[j] * khat;
                        dkt[j] = dkt[j] + b * dcrow[j] * vt[i] * scale;
                    }
                    db = db + dc_khat * vt[i];
                    dvt[i] = dvt[i] + b * dc_khat;
                }
                for j in 0..d {
                    da = da + dn[j] * n_prev[j];
                    db = db + dn[j] * kt[j] * scale;
                    dkt[j] = dkt[j] + b * dn[j] * scale;
                }
                dig[ix] = db * b;
                dfg[ix] = da * a * self.gate.dlog_f(fg.data()[ix]);
                for x in dc.iter_mut() {
                    *x = *x * a;
                }
                for x in dn.iter_mut() {
                    *x = *x * a;
                }
            }
        }
        vec![
            Tensor::from_parts(q.shape().to_vec(), dq),
            Tensor::from_parts(k.shape().to_vec(), dk),
            Tensor::from_parts(v.shape().to_vec(), dv),
            Tensor::from_parts(ig.shape().to_vec(), dig),
            Tensor::from_parts(fg.shape().to_vec(), dfg),
        ]
    }
}

/// One block over a `T × D` sequence; `reverse` runs it back to front.
pub fn block_forward<T: Real>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &MlstmParams,
    x: Var,
    reverse: bool,
) -> Result<Var> {
    let steps = tape.value(x).rows();
    if steps == 0 {
        return Err(Error::EmptySequence);
    }
    if !reverse {
        return block_core(tape, store, p, x);
    }
    let rev = std::sync::Arc::new((0..steps).rev().collect::<Vec<_>>());
    let xr = tape.gather_rows(x, rev.clone())?;
    let y = block_core(tape, store, p, xr)?;
    tape.gather_rows(y, rev)
}

fn block_core<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &MlstmParams, x: Var) -> Result<Var> {
    let eps = T::of_f64(p.eps);
    let xn = p.norm.forward(tape, store, x, p.eps)?;
    let q = p.q.forward(tape, store, xn)?;
    let k = p.k.forward(tape, store, xn)?;
    let v = p.v.forward(tape, store, xn)?;
    let ig = p.igate.forward(tape, store, xn)?;
    let fg = p.fgate.forward(tape, store, xn)?;
    let h = scan_on_tape(tape, q, k, v, ig, fg, p.heads, p.gate)?;
    let steps = tape.value(h).rows();
    let per_head = tape.reshape(h, &[steps * p.heads, p.head_dim()])?;
    let normed = tape.normalize(per_head, eps);
    let flat = tape.reshape(normed, &[steps, p.dim])?;
    let (hg, hb) = (tape.param(store, p.head_norm.g), tape.param(store, p.head_norm.b));
    let scaled = tape.mul_row(flat, hg)?;
    let hn = tape.add_row(scaled, hb)?;
    let out = p.out.forward(tape, store, hn)?;
    tape.add(x, out)
}

fn vec_matmul<T: Real>(x: &[T], w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let n = w.cols();
    let mut out = b.data().to_vec();
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wv) in out.iter_mut().zip(w.row(i)) {
            *o = *o + xi * wv;
        }
    }
    debug_assert_eq!(out.len(), n);
    out
}

fn norm_affine<T: Real>(x: &[T], g: &[T], b: &[T], eps: T) -> Vec<T> {
    let dn = T::from_usize(x.len()).unwrap();
    let mean = x.iter().copied().sum::<T>() / dn;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
    let inv = T::one() / (var + eps).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((&v, &g), &b)| (v - mean) * inv * g + b)
        .collect()
}

/// Single-token step of a full block: pre-norm, projections, recurrence,
/// multi-head norm, output projection and residual. `step` only labels
/// numerical errors.
pub fn mlstm_cell_step<T: Real>(
    state: &MlstmState<T>,
    x: &[T],
    store: &ParamStore<T>,
    p: &MlstmParams,
    step: usize,
) -> Result<(MlstmState<T>, Vec<T>)> {
    if x.len() != p.dim {
        return Err(Error::dim("mlstm_cell_step", format!("token of {} for dim {}", x.len(), p.dim)));
    }
    let eps = T::of_f64(p.eps);
    let d = p.head_dim();
    let xn = norm_affine(x, store.get(p.norm.g).data(), store.get(p.norm.b).data(), eps);
    let lin = |l: &Linear| vec_matmul(&xn, store.get(l.w), store.get(l.b));
    let (q, k, v, ig, fg) = (lin(&p.q), lin(&p.k), lin(&p.v), lin(&p.igate), lin(&p.fgate));
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let ks: Vec<T> = k.iter().map(|&v| v * scale).collect();
    let mut next = state.clone();
    let mut h = vec![T::zero(); p.dim];
    recurrence_step(&mut next, &q, &ks, &v, &ig, &fg, p.gate, &mut h, |_, _, _, _, _| {});
    if !next.is_finite() || !h.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical { step });
    }
    let ones = vec![T::one(); d];
    let zeros = vec![T::zero(); d];
    let mut hn = Vec::with_capacity(p.dim);
    for hd in 0..p.heads {
        hn.extend(norm_affine(&h[hd * d..(hd + 1) * d], &ones, &zeros, eps));
    }
    let (hg, hb) = (store.get(p.head_norm.g).data(), store.get(p.head_norm.b).data());
    for (i, v) in hn.iter_mut().enumerate() {
        *v = *v * hg[i] + hb[i];
    }
    let out = vec_matmul(&hn, store.get(p.out.w), store.get(p.out.b));
    let y = x.iter().zip(&out).map(|(&a, &b)| a + b).collect();
    Ok((next, y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block(dim: usize, heads: usize, seed: u64) -> (ParamStore<f64>, MlstmParams) {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let p = MlstmParams::init(&mut store, &mut init, "blk", dim, heads, ForgetGate::Sigmoid, 1e-5);
        (store, p)
    }

    fn randomize(store: &mut ParamStore<f64>, seed: u64, scale: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }

    fn seq(t: usize, d: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[t, d], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_everything_stays_zero() {
        let (mut store, p) = block(4, 2, 0);
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).unwrap();
        }
        let s0 = MlstmState::zeros(2, 2);
        let (s1, y) = mlstm_cell_step(&s0, &[0.0; 4], &store, &p, 0).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert_eq!(s1, s0);
    }

    #[test]
    fn degenerate_gates_store_outer_product() {
        let mut state = MlstmState::<f64>::zeros(1, 3);
        let q = [0.3, -0.2, 0.5];
        let k = [1.0, 2.0, -1.0];
        let v = [0.5, -1.5, 2.0];
        let mut h = [0.0; 3];
        // i~ = 0 gives i = 1; a very negative forget pre-activation gives f = 0.
        recurrence_step(&mut state, &q, &k, &v, &[0.0], &[-1e4], ForgetGate::Sigmoid, &mut h, |_, _, _, _, _| {});
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(state.c[i * 3 + j], v[i] * k[j]);
            }
        }
        assert_eq!(state.n, k.to_vec());
    }

    #[test]
    fn sequence_path_matches_cell_steps() {
        let (mut store, p) = block(8, 2, 1);
        randomize(&mut store, 2, 0.3);
        let x = seq(7, 8, 3);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = block_forward(&mut tape, &store, &p, xv, false).unwrap();
        let mut state = MlstmState::zeros(2, 4);
        for t in 0..7 {
            let (next, out) = mlstm_cell_step(&state, x.row(t), &store, &p, t).unwrap();
            state = next;
            for (a, b) in out.iter().zip(tape.value(y).row(t)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reverse_is_flip_conjugation() {
        let (mut store, p) = block(8, 4, 4);
        randomize(&mut store, 5, 0.3);
        let x = seq(6, 8, 6);
        let flip = |t: &Tensor<f64>| {
            let rows: Vec<f64> = (0..t.rows()).rev().flat_map(|r| t.row(r).to_vec()).collect();
            Tensor::matrix(t.rows(), t.cols(), rows).unwrap()
        };
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let rev = block_forward(&mut tape, &store, &p, xv, true).unwrap();
        let xf = tape.input(flip(&x));
        let fwd = block_forward(&mut tape, &store, &p, xf, false).unwrap();
        assert_eq!(tape.value(rev), &flip(tape.value(fwd)));
    }

    #[test]
    fn single_token_ignores_direction() {
        let (store, p) = block(4, 2, 7);
        let mut tape = Tape::new();
        let x = tape.input(seq(1, 4, 8));
        let a = block_forward(&mut tape, &store, &p, x, false).unwrap();
        let b = block_forward(&mut tape, &store, &p, x, true).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn palindrome_with_symmetric_params() {
        // With gates independent of the token and a palindromic input the
        // forward and reversed scans see the same sequence.
        let (store, p) = block(4, 2, 9);
        let x = seq(3, 4, 10);
        let pal = Tensor::matrix(5, 4, [x.row(0), x.row(1), x.row(2), x.row(1), x.row(0)].concat()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(pal);
        let a = block_forward(&mut tape, &store, &p, xv, false).unwrap();
        let b = block_forward(&mut tape, &store, &p, xv, true).unwrap();
        let (va, vb) = (tape.value(a), tape.value(b));
        // The middle token sees the same prefix set in both directions.
        for j in 0..4 {
            assert!((va.at(&[2, j]) - vb.at(&[2, j])).abs() < 1e-12);
        }
    }

    #[test]
    fn numerical_error_names_step() {
        let (mut store, p) = block(4, 1, 11);
        store.get_mut(p.fgate.b).data_mut()[0] = f64::NAN;
        let mut tape = Tape::new();
        let x = tape.input(seq(3, 4, 12));
        assert!(matches!(block_forward(&mut tape, &store, &p, x, false), Err(Error::Numerical { step: 0 })));
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        for gate in [ForgetGate::Sigmoid, ForgetGate::Exp] {
            let mut store = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let mut t = |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| rng.gen_range(lo..hi));
            let q = store.insert("q", t(&[5, 6], -1.0, 1.0), false);
            let k = store.insert("k", t(&[5, 6], -1.0, 1.0), false);
            let v = store.insert("v", t(&[5, 6], -1.0, 1.0), false);
            let ig = store.insert("ig", t(&[5, 2], -3.0, 3.0), false);
            let fg = store.insert("fg", t(&[5, 2], -3.0, 3.0), false);
            let w = t(&[5, 6], -1.0, 1.0);
            let report = grad_check(
                |tape, s| {
                    let vars: Vec<Var> = [q, k, v, ig, fg].iter().map(|&id| tape.param(s, id)).collect();
                    let h = scan_on_tape(tape, vars[0], vars[1], vars[2], vars[3], vars[4], 2, gate)?;
                    let wv = tape.input(w.clone());
                    let prod = tape.mul(h, wv)?;
                    Ok(tape.sum(prod))
                },
                &store,
                GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed(), "{gate:?}\n{report}");
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (mut store, p) = block(6, 2, 14);
        randomize(&mut store, 15, 0.2);
        let x = seq(4, 6, 16);
        let w = seq(4, 6, 17);
        let report = grad_check(
            |tape, s| {
                let xv = tape.input(x.clone());
                let y = block_forward(tape, s, &p, xv, true)?;
                let wv = tape.input(w.clone());
                let prod = tape.mul(y, wv)?;
                Ok(tape.sum(prod))
            },
            &store,
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
