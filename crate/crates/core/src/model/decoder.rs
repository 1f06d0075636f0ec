//! Masked self-attention decoder blocks.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};

use super::init::Init;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn init<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.insert(format!("{name}.w"), init.xavier(fan_in, fan_out), true);
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]), false);
        Self { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.w), tape.param(store, self.b));
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn init<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let g = store.insert(format!("{name}.g"), Tensor::full(&[dim], T::one()), false);
        let b = store.insert(format!("{name}.b"), Tensor::zeros(&[dim]), false);
        Self { g, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, eps: f64) -> Result<Var> {
        let (g, b) = (tape.param(store, self.g), tape.param(store, self.b));
        tape.layer_norm(x, g, b, T::of_f64(eps))
    }
}

/// Pre-norm masked self-attention followed by a SiLU MLP, both residual.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub attn_norm: Norm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp_norm: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub heads: usize,
    pub eps: f64,
}

impl AttnBlock {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Self {
        let hidden = width * mlp_ratio;
        Self {
            attn_norm: Norm::init(store, &format!("{prefix}.attn_norm"), width),
            q: Linear::init(store, init, &format!("{prefix}.attn.q"), width, width),
            k: Linear::init(store, init, &format!("{prefix}.attn.k"), width, width),
            v: Linear::init(store, init, &format!("{prefix}.attn.v"), width, width),
            o: Linear::init(store, init, &format!("{prefix}.attn.o"), width, width),
            mlp_norm: Norm::init(store, &format!("{prefix}.mlp_norm"), width),
            fc1: Linear::init(store, init, &format!("{prefix}.mlp.fc1"), width, hidden),
            fc2: Linear::init(store, init, &format!("{prefix}.mlp.fc2"), hidden, width),
            heads,
            eps,
        }
    }

    /// `mask` is the additive `N × N` content mask.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, mask: &Tensor<T>) -> Result<Var> {
        let n = tape.value(x).rows();
        if mask.shape() != [n, n] {
            return Err(Error::dim(
                "decoder attention",
                format!("mask {:?} for a sequence of {n}", mask.shape()),
            ));
        }
        let width = tape.value(x).cols();
        let dh = width / self.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let xn = self.attn_norm.forward(tape, store, x, self.eps)?;
        let q = self.q.forward(tape, store, xn)?;
        let k = self.k.forward(tape, store, xn)?;
        let v = self.v.forward(tape, store, xn)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, scale);
            let att = tape.masked_softmax(logits, mask)?;
            outs.push(tape.matmul(att, vh)?);
        }
        let cat = tape.concat_cols(&outs)?;
        let attn = self.o.forward(tape, store, cat)?;
        let x = tape.add(x, attn)?;
        let xn = self.mlp_norm.forward(tape, store, x, self.eps)?;
        let hid = self.fc1.forward(tape, store, xn)?;
        let hid = tape.silu(hid)?;
        let out = self.fc2.forward(tape, store, hid)?;
        tape.add(x, out)
    }
}
