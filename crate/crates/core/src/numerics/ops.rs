//! Forward kernels shared by the tape and by tape-free evaluation.

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// `c (m×n) += a (m×k) · b (k×n)`, accumulating over `k` in ascending order.
pub(crate) fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c (m×n) += a (m×k) · bᵀ` where `b` is stored `n×k`.
pub(crate) fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c (m×n) += aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub(crate) fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Matrix product of `a` (rows×k, leading axes flattened) and a k×n matrix `b`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if b.rank() != 2 {
        return Err(Error::dim("matmul", format!("rhs must be a matrix, got {:?}", b.shape())));
    }
    let (m, k) = (a.rows(), a.cols());
    let n = b.cols();
    if b.rows() != k {
        return Err(Error::dim(
            "matmul",
            format!("{:?} x {:?}: inner extents differ", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Row-wise softmax of `logits + mask`.
///
/// `mask` holds additive entries in `{0, -inf}` and has either one row
/// (broadcast) or as many rows as `logits`. Masked entries come out as exact
/// zeros.
pub fn masked_softmax<T: Real>(logits: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    let cols = logits.cols();
    if mask.cols() != cols || (mask.rows() != 1 && mask.rows() != logits.rows()) {
        return Err(Error::dim(
            "masked_softmax",
            format!("logits {:?} vs mask {:?}", logits.shape(), mask.shape()),
        ));
    }
    let mut out = vec![T::zero(); logits.len()];
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mrow = mask.row(if mask.rows() == 1 { 0 } else { r });
        let dst = &mut out[r * cols..(r + 1) * cols];
        softmax_row(row, mrow, dst).ok_or(Error::DegenerateRow { row: r })?;
    }
    Ok(Tensor::from_parts(logits.shape().to_vec(), out))
}

/// Returns `None` when every entry is masked.
pub(crate) fn softmax_row<T: Real>(row: &[T], mask: &[T], dst: &mut [T]) -> Option<()> {
    let mut max = T::neg_infinity();
    for (&x, &m) in row.iter().zip(mask) {
        if m != T::neg_infinity() && x > max {
            max = x;
        }
    }
    if max == T::neg_infinity() {
        return None;
    }
    let mut sum = T::zero();
    for ((d, &x), &m) in dst.iter_mut().zip(row).zip(mask) {
        *d = if m == T::neg_infinity() {
            T::zero()
        } else {
            (x + m - max).exp()
        };
        sum = sum + *d;
    }
    let inv = T::one() / sum;
    for d in dst.iter_mut() {
        *d = *d * inv;
    }
    Some(())
}

/// Per-row standardization over the last axis followed by `gain`/`bias`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    let (normed, _) = normalize_rows(x, eps);
    let mut out = normed.into_data();
    for row in out.chunks_mut(d) {
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Standardizes each row; also returns the per-row `1/sqrt(var + eps)`.
pub(crate) fn normalize_rows<T: Real>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let d = x.cols();
    let dn = T::from_usize(d).unwrap();
    let mut out = vec![T::zero(); x.len()];
    let mut inv_stds = Vec::with_capacity(x.rows());
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let mean = src.iter().copied().sum::<T>() / dn;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
        inv_stds.push(inv);
    }
    (Tensor::from_parts(x.shape().to_vec(), out), inv_stds)
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(sigmoid(x))` without overflow.
#[inline]
pub(crate) fn log_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
