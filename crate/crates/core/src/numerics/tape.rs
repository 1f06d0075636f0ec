//! Reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with its output value. [`Tape::backward`] walks the record in reverse and
//! returns gradients for every trainable parameter that took part.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::ops::{self, gemm_nn, gemm_nt, gemm_tn};
use super::{Grads, ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A primitive with a hand-written backward pass.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>)
        -> Vec<Tensor<T>>;
}

enum Op<T: Real> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Sigmoid(Var),
    Tanh(Var),
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, idx: Arc<Vec<usize>> },
    ScatterRows { x: Var, idx: Arc<Vec<usize>> },
    RepeatRows(Var),
    Normalize { x: Var, inv_std: Vec<T> },
    MaskedSoftmax(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy { logits: Var, labels: Arc<Vec<usize>>, probs: Tensor<T> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Operation record for one forward pass. Confined to one thread.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    /// Enters a parameter; repeated calls return the same node. Frozen
    /// parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let op = if entry.trainable {
            Op::Param(id)
        } else {
            Op::Input
        };
        let v = self.push(entry.value.clone(), op);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for matrices `a` (m×k) and `b` (n×k).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(Error::dim(
                "matmul_nt",
                format!("{:?} x {:?}ᵀ", av.shape(), bv.shape()),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMulNT(a, b)))
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("max", a, b, |x, y| if x >= y { x } else { y })?;
        Ok(self.push(out, Op::Max(a, b)))
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, r: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (xv, rv) = (self.value(x), self.value(r));
        let c = xv.cols();
        if rv.len() != c {
            return Err(Error::dim(name, format!("{:?} with row {:?}", xv.shape(), rv.shape())));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &b) in row.iter_mut().zip(rv.data()) {
                *v = f(*v, b);
            }
        }
        Ok(Tensor::from_parts(xv.shape().to_vec(), data))
    }

    /// Adds a length-`cols` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", x, bias, |v, b| v + b)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    /// Multiplies every row elementwise by a length-`cols` vector.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", x, gain, |v, g| v * g)?;
        Ok(self.push(out, Op::MulRow(x, gain)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        self.push(out, Op::Exp(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(ops::sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        self.push(out, Op::Tanh(x))
    }

    /// `x · sigmoid(x)`, composed from primitives.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let s = self.sigmoid(x);
        self.mul(x, s)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} of {c} columns")));
        }
        let r = xv.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        Ok(self.push(Tensor::from_parts(vec![r, len], data), Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Output row `i` is input row `idx[i]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::dim("gather_rows", format!("index out of {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            data.extend_from_slice(xv.row(i));
        }
        Ok(self.push(Tensor::from_parts(vec![idx.len(), c], data), Op::GatherRows { x, idx }))
    }

    /// Places input row `i` at output row `idx[i]` of an `n_rows`-row zero
    /// matrix. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, idx: Arc<Vec<usize>>, n_rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if idx.len() != xv.rows() || idx.iter().any(|&i| i >= n_rows) {
            return Err(Error::dim("scatter_rows", format!("{} rows into {n_rows}", xv.rows())));
        }
        let mut data = vec![T::zero(); n_rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            data[dst * c..(dst + 1) * c].copy_from_slice(xv.row(src));
        }
        Ok(self.push(Tensor::from_parts(vec![n_rows, c], data), Op::ScatterRows { x, idx }))
    }

    /// Stacks `n` copies of a single row.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        let c = xv.len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            data.extend_from_slice(xv.data());
        }
        self.push(Tensor::from_parts(vec![n, c], data), Op::RepeatRows(x))
    }

    /// Per-row standardization without affine terms.
    pub fn normalize(&mut self, x: Var, eps: T) -> Var {
        let (out, inv_std) = ops::normalize_rows(self.value(x), eps);
        self.push(out, Op::Normalize { x, inv_std })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let n = self.normalize(x, eps);
        let g = self.mul_row(n, gain)?;
        self.add_row(g, bias)
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let out = ops::masked_softmax(self.value(x), mask)?;
        Ok(self.push(out, Op::MaskedSoftmax(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / T::from_usize(xv.len()).unwrap());
        self.push(out, Op::Mean(x))
    }

    /// Mean softmax cross-entropy over rows of `logits` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, k) = (lv.rows(), lv.cols());
        if labels.len() != r {
            return Err(Error::dim("cross_entropy", format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let open = Tensor::zeros(&[1, k]);
        let probs = ops::masked_softmax(lv, &open)?;
        let mut nll = T::zero();
        for (i, &l) in labels.iter().enumerate() {
            let row = lv.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            nll = nll + lse - row[l];
        }
        let out = Tensor::scalar(nll / T::from_usize(r).unwrap());
        Ok(self.push(out, Op::CrossEntropy { logits, labels, probs }))
    }

    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(value, Op::Custom { inputs, op })
    }

    /// Backpropagates from a single-element `loss`.
    pub fn backward(&self, loss: Var, num_params: usize) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", "loss must hold exactly one value"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        let mut out = Grads::empty(num_params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut Grads<T>,
    ) {
        let mut send = |v: Var, t: Tensor<T>| match &mut grads[v.0] {
            Some(acc) => add_into(acc.data_mut(), t.data()),
            slot @ None => *slot = Some(t),
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let like = |v: Var, data: Vec<T>| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), data);

        match &node.op {
            Op::Input => {}
            Op::Param(id) => params.accumulate(*id, &g),
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![T::zero(); m * k];
                gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                gemm_tn(av.data(), g.data(), &mut gb, k, m, n);
                send(*a, like(*a, ga));
                send(*b, like(*b, gb));
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                let mut ga = vec![T::zero(); m * k];
                gemm_nn(g.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); n * k];
                gemm_tn(g.data(), av.data(), &mut gb, n, m, k);
                send(*a, like(*a, ga));
                send(*b, like(*b, gb));
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g);
            }
            Op::Sub(a, b) => {
                send(*b, g.map(|v| -v));
                send(*a, g);
            }
            Op::Mul(a, b) => {
                let ga = g.data().iter().zip(val(*b).data()).map(|(&x, &y)| x * y).collect();
                let gb = g.data().iter().zip(val(*a).data()).map(|(&x, &y)| x * y).collect();
                send(*a, like(*a, ga));
                send(*b, like(*b, gb));
            }
            Op::Max(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let mut ga = vec![T::zero(); g.len()];
                let mut gb = vec![T::zero(); g.len()];
                for i in 0..g.len() {
                    if av[i] >= bv[i] {
                        ga[i] = g.data()[i];
                    } else {
                        gb[i] = g.data()[i];
                    }
                }
                send(*a, like(*a, ga));
                send(*b, like(*b, gb));
            }
            Op::AddRow(x, r) => {
                let c = g.cols();
                let mut gr = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    add_into(&mut gr, row);
                }
                send(*r, like(*r, gr));
                send(*x, g);
            }
            Op::MulRow(x, r) => {
                let c = g.cols();
                let (xv, rv) = (val(*x), val(*r));
                let mut gr = vec![T::zero(); c];
                let mut gx = vec![T::zero(); g.len()];
                for (i, (grow, xrow)) in g.data().chunks(c).zip(xv.data().chunks(c)).enumerate() {
                    for j in 0..c {
                        gr[j] = gr[j] + grow[j] * xrow[j];
                        gx[i * c + j] = grow[j] * rv.data()[j];
                    }
                }
                send(*r, like(*r, gr));
                send(*x, like(*x, gx));
            }
            Op::Scale(x, c) => send(*x, g.map(|v| v * *c)),
            Op::Exp(x) => {
                let d = g.data().iter().zip(node.value.data()).map(|(&gv, &y)| gv * y).collect();
                send(*x, like(*x, d));
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                send(*x, like(*x, d));
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                send(*x, like(*x, d));
            }
            Op::Reshape(x) => send(*x, like(*x, g.into_data())),
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let (c, w) = (xv.cols(), g.cols());
                let mut gx = vec![T::zero(); xv.len()];
                for (i, row) in g.data().chunks(w).enumerate() {
                    gx[i * c + start..i * c + start + w].copy_from_slice(row);
                }
                send(*x, like(*x, gx));
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Vec::with_capacity(val(p).len());
                    for row in g.data().chunks(total) {
                        gp.extend_from_slice(&row[offset..offset + w]);
                    }
                    offset += w;
                    send(p, like(p, gp));
                }
            }
            Op::GatherRows { x, idx } => {
                let xv = val(*x);
                let c = xv.cols();
                let mut gx = vec![T::zero(); xv.len()];
                for (src, &dst) in idx.iter().enumerate() {
                    add_into(&mut gx[dst * c..(dst + 1) * c], g.row(src));
                }
                send(*x, like(*x, gx));
            }
            Op::ScatterRows { x, idx } => {
                let c = g.cols();
                let mut gx = Vec::with_capacity(idx.len() * c);
                for &i in idx.iter() {
                    gx.extend_from_slice(g.row(i));
                }
                send(*x, like(*x, gx));
            }
            Op::RepeatRows(x) => {
                let c = g.cols();
                let mut gx = vec![T::zero(); c];
                for row in g.data().chunks(c) {
                    add_into(&mut gx, row);
                }
                send(*x, like(*x, gx));
            }
            Op::Normalize { x, inv_std } => {
                // dx = inv_std * (g - mean(g) - y * mean(g * y))
                let c = g.cols();
                let cn = T::from_usize(c).unwrap();
                let mut gx = vec![T::zero(); g.len()];
                for (i, (grow, yrow)) in g.data().chunks(c).zip(node.value.data().chunks(c)).enumerate() {
                    let mg = grow.iter().copied().sum::<T>() / cn;
                    let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() / cn;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (grow[j] - mg - yrow[j] * mgy);
                    }
                }
                send(*x, like(*x, gx));
            }
            Op::MaskedSoftmax(x) => {
                let c = g.cols();
                let mut gx = vec![T::zero(); g.len()];
                for (i, (grow, yrow)) in g.data().chunks(c).zip(node.value.data().chunks(c)).enumerate() {
                    let dot = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>();
                    for j in 0..c {
                        gx[i * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                send(*x, like(*x, gx));
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                send(*x, val(*x).map(|_| s));
            }
            Op::Mean(x) => {
                let s = g.data()[0] / T::from_usize(val(*x).len()).unwrap();
                send(*x, val(*x).map(|_| s));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let r = probs.rows();
                let s = g.data()[0] / T::from_usize(r).unwrap();
                let c = probs.cols();
                let mut gl: Vec<T> = probs.data().iter().map(|&p| p * s).collect();
                for (i, &l) in labels.iter().enumerate() {
                    gl[i * c + l] = gl[i * c + l] - s;
                }
                send(*logits, like(*logits, gl));
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, &g);
                debug_assert_eq!(gs.len(), inputs.len(), "{} returned wrong arity", op.name());
                for (&v, gt) in inputs.iter().zip(gs) {
                    send(v, gt);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("theta", Tensor::scalar(3.0), false);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y, store.len()).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn repeated_param_use_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::scalar(2.0), false);
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let s = tape.add(a, b).unwrap();
        let s2 = tape.add(s, a).unwrap();
        let g = tape.backward(s2, store.len()).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[3.0]);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::scalar(2.0), false);
        let b = store.insert("b", Tensor::scalar(5.0), false);
        store.set_trainable(b, false);
        let mut tape = Tape::new();
        let (va, vb) = (tape.param(&store, a), tape.param(&store, b));
        let y = tape.mul(va, vb).unwrap();
        let g = tape.backward(y, store.len()).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[5.0]);
        assert!(g.get(b).is_none());
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[2]));
        assert!(tape.backward(x, 0).is_err());
    }

    #[test]
    fn scatter_then_gather_roundtrips_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap());
        let idx = Arc::new(vec![3, 1]);
        let s = tape.scatter_rows(x, idx.clone(), 4).unwrap();
        assert_eq!(tape.value(s).data(), &[0., 0., 3., 4., 0., 0., 1., 2.]);
        let back = tape.gather_rows(s, idx).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(
            tape.cross_entropy(x, Arc::new(vec![3])),
            Err(Error::Label { label: 3, classes: 3 })
        ));
    }
}
