//! The MAL network: bidirectional mLSTM encoder, masked-attention decoder
//! and task heads.

mod decoder;
mod init;
mod mlstm;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::MaskSelection;
use crate::numerics::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::serialize::{build_cluster_plan, embed_on_tape, patchify, unpatchify, ClusterPlan, Order, PatchGrid};

pub use decoder::{AttnBlock, Linear, Norm};
pub use init::Init;
pub use mlstm::{block_forward, mlstm_cell_step, mlstm_scan, ForgetGate, MlstmParams, MlstmState};

/// Architecture hyperparameters. Cluster extents count patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub cluster_h: usize,
    pub cluster_w: usize,
    pub order: Order,
    pub order_seed: u64,
    pub dim: usize,
    pub heads: usize,
    pub enc_depth: usize,
    pub dec_depth: usize,
    pub dec_width: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub seg_classes: usize,
    pub forget_gate: ForgetGate,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_h: 32,
            image_w: 32,
            channels: 3,
            patch: 4,
            cluster_h: 2,
            cluster_w: 2,
            order: Order::RowForward,
            order_seed: 0,
            dim: 128,
            heads: 4,
            enc_depth: 6,
            dec_depth: 4,
            dec_width: 128,
            mlp_ratio: 4,
            num_classes: 3,
            seg_classes: 4,
            forget_gate: ForgetGate::Sigmoid,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for full gradient checks: 16×16 RGB,
    /// 4×4 patch grid, 2×2 clusters.
    pub fn tiny() -> Self {
        Self {
            image_h: 16,
            image_w: 16,
            patch: 4,
            dim: 16,
            heads: 2,
            enc_depth: 2,
            dec_depth: 2,
            dec_width: 16,
            mlp_ratio: 2,
            num_classes: 3,
            ..Self::default()
        }
    }

    pub fn grid_h(&self) -> usize {
        self.image_h / self.patch.max(1)
    }

    pub fn grid_w(&self) -> usize {
        self.image_w / self.patch.max(1)
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h() * self.grid_w()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Every violated constraint, empty when the configuration is usable.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("channels", self.channels),
            ("patch", self.patch),
            ("cluster_h", self.cluster_h),
            ("cluster_w", self.cluster_w),
            ("dim", self.dim),
            ("heads", self.heads),
            ("dec_width", self.dec_width),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
            ("seg_classes", self.seg_classes),
        ];
        for (name, val) in positive {
            if val == 0 {
                v.push(format!("model.{name} must be positive"));
            }
        }
        if self.patch > 0 {
            if self.image_h % self.patch != 0 {
                v.push(format!("image height {} is not divisible by patch {}", self.image_h, self.patch));
            }
            if self.image_w % self.patch != 0 {
                v.push(format!("image width {} is not divisible by patch {}", self.image_w, self.patch));
            }
        }
        if self.cluster_h > 0 && self.grid_h() % self.cluster_h != 0 {
            v.push(format!(
                "patch grid height {} is not divisible by cluster height {}",
                self.grid_h(),
                self.cluster_h
            ));
        }
        if self.cluster_w > 0 && self.grid_w() % self.cluster_w != 0 {
            v.push(format!(
                "patch grid width {} is not divisible by cluster width {}",
                self.grid_w(),
                self.cluster_w
            ));
        }
        if self.heads > 0 && self.dim % self.heads != 0 {
            v.push(format!("dim {} is not divisible by {} heads", self.dim, self.heads));
        }
        if self.heads > 0 && self.dec_width % self.heads != 0 {
            v.push(format!("decoder width {} is not divisible by {} heads", self.dec_width, self.heads));
        }
        if self.num_patches() < 2 {
            v.push("the classification head needs at least 2 patches".into());
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            v.push(format!("ln_eps {} must be positive", self.ln_eps));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn plan(&self) -> Result<ClusterPlan> {
        build_cluster_plan(
            self.grid_h(),
            self.grid_w(),
            self.cluster_h,
            self.cluster_w,
            self.order,
            Some(self.order_seed),
        )
    }

    /// SHA-256 of the canonical JSON form; identifies compatible checkpoints.
    pub fn fingerprint(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub proj: Linear,
    pub pos: ParamId,
    pub mask_token: ParamId,
    pub blocks: Vec<AttnBlock>,
    pub out: Linear,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    pub cls: Linear,
    pub depth: Linear,
    pub seg: Linear,
}

/// Parameter layout plus the fixed serialization plan.
#[derive(Debug, Clone)]
pub struct MalModel {
    pub cfg: ModelConfig,
    pub plan: ClusterPlan,
    pub embed_w: ParamId,
    pub embed_pos: ParamId,
    pub enc: Vec<MlstmParams>,
    pub dec: DecoderParams,
    pub heads: HeadParams,
}

/// Decoder results for one image.
pub struct DecodeOutput {
    /// `N × dec_width` hidden states, serialized order.
    pub hidden: Var,
    /// `N × (C·P·P)` per-position predictions, serialized order.
    pub preds: Var,
}

impl MalModel {
    /// Validates `cfg` and initializes every parameter from `seed`.
    pub fn new<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        cfg.validate()?;
        let plan = cfg.plan()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let (n, d, dd, pd) = (cfg.num_patches(), cfg.dim, cfg.dec_width, cfg.patch_dim());
        let pos_bound = 0.02 * 3f64.sqrt();
        let embed_w = store.insert("embed.w", init.xavier(pd, d), true);
        let embed_pos = store.insert("embed.pos", init.uniform(&[n, d], pos_bound), false);
        let enc = (0..cfg.enc_depth)
            .map(|i| MlstmParams::init(&mut store, &mut init, &format!("enc.{i}"), d, cfg.heads, cfg.forget_gate, cfg.ln_eps))
            .collect();
        let proj = Linear::init(&mut store, &mut init, "dec.proj", d, dd);
        let pos = store.insert("dec.pos", init.uniform(&[n, dd], pos_bound), false);
        let mask_token = store.insert("dec.mask_token", init.uniform(&[1, dd], pos_bound), false);
        let blocks = (0..cfg.dec_depth)
            .map(|i| AttnBlock::init(&mut store, &mut init, &format!("dec.{i}"), dd, cfg.heads, cfg.mlp_ratio, cfg.ln_eps))
            .collect();
        let out = Linear::init(&mut store, &mut init, "dec.out", dd, pd);
        let p2 = cfg.patch * cfg.patch;
        let heads = HeadParams {
            cls: Linear::init(&mut store, &mut init, "head.cls", 2 * d, cfg.num_classes),
            depth: Linear::init(&mut store, &mut init, "head.depth", dd, p2),
            seg: Linear::init(&mut store, &mut init, "head.seg", dd, p2 * cfg.seg_classes),
        };
        let model = Self {
            cfg: cfg.clone(),
            plan,
            embed_w,
            embed_pos,
            enc,
            dec: DecoderParams {
                proj,
                pos,
                mask_token,
                blocks,
                out,
            },
            heads,
        };
        Ok((model, store))
    }

    pub fn patchify<T: Real>(&self, image: &Tensor<T>) -> Result<PatchGrid<T>> {
        let c = &self.cfg;
        if image.shape() != [c.channels, c.image_h, c.image_w] {
            return Err(Error::Geometry(format!(
                "image {:?} does not match configured {}×{}×{}",
                image.shape(),
                c.channels,
                c.image_h,
                c.image_w
            )));
        }
        patchify(image, c.patch)
    }

    /// Serialized `N × D` token sequence of an image.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Var> {
        let grid = self.patchify(image)?;
        let x = tape.input(grid.patches);
        let w = tape.param(store, self.embed_w);
        let pos = tape.param(store, self.embed_pos);
        embed_on_tape(tape, x, &self.plan, w, pos)
    }

    /// Applies the mLSTM blocks, alternating forward and reversed scans.
    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, tokens: Var) -> Result<Var> {
        self.enc
            .iter()
            .enumerate()
            .try_fold(tokens, |h, (i, p)| block_forward(tape, store, p, h, i % 2 == 1))
    }

    /// `g⁽⁰⁾`: projected encoder states at visible slots, the mask token at
    /// masked slots, plus decoder positional embeddings.
    ///
    /// `enc_visible` holds one row per visible slot in ascending slot order.
    pub fn decoder_input<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        enc_visible: Option<Var>,
        sel: &MaskSelection,
    ) -> Result<Var> {
        let n = self.plan.len();
        if sel.masked.len() != n {
            return Err(Error::dim("decoder input", format!("selection of {} for {n} slots", sel.masked.len())));
        }
        let visible = sel.visible_slots();
        let masked = sel.masked_slots();
        let pos = tape.param(store, self.dec.pos);
        let mut g = tape.gather_rows(pos, self.plan.perm.clone())?;
        match enc_visible {
            Some(e) => {
                if tape.value(e).rows() != visible.len() {
                    return Err(Error::dim(
                        "decoder input",
                        format!("{} encoder rows for {} visible slots", tape.value(e).rows(), visible.len()),
                    ));
                }
                let proj = self.dec.proj.forward(tape, store, e)?;
                let placed = tape.scatter_rows(proj, Arc::new(visible), n)?;
                g = tape.add(g, placed)?;
            }
            None if !visible.is_empty() => {
                return Err(Error::dim("decoder input", "visible slots without encoder states"));
            }
            None => {}
        }
        if !masked.is_empty() {
            let tok = tape.param(store, self.dec.mask_token);
            let rep = tape.repeat_rows(tok, masked.len());
            let placed = tape.scatter_rows(rep, Arc::new(masked), n)?;
            g = tape.add(g, placed)?;
        }
        Ok(g)
    }

    /// Decoder blocks under `mask`, then the output projection.
    pub fn decode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, g0: Var, mask: &Tensor<T>) -> Result<DecodeOutput> {
        let hidden = self
            .dec
            .blocks
            .iter()
            .try_fold(g0, |g, b| b.forward(tape, store, g, mask))?;
        let preds = self.dec.out.forward(tape, store, hidden)?;
        Ok(DecodeOutput { hidden, preds })
    }

    /// Full masked pass: embed, encode visible tokens, decode every slot.
    pub fn forward_masked<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        sel: &MaskSelection,
        mask: &Tensor<T>,
    ) -> Result<DecodeOutput> {
        let tokens = self.embed(tape, store, image)?;
        let visible = sel.visible_slots();
        let enc = if visible.is_empty() {
            None
        } else {
            let vis = if visible.len() == self.plan.len() {
                tokens
            } else {
                tape.gather_rows(tokens, Arc::new(visible))?
            };
            Some(self.encode(tape, store, vis)?)
        };
        let g0 = self.decoder_input(tape, store, enc, sel)?;
        self.decode(tape, store, g0, mask)
    }

    /// Class logits (`1 × classes`) from the first and last serialized tokens.
    pub fn classify<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, enc_out: Var) -> Result<Var> {
        let (n, d) = (tape.value(enc_out).rows(), tape.value(enc_out).cols());
        if n < 2 {
            return Err(Error::Geometry(format!("classification needs at least 2 tokens, got {n}")));
        }
        let ends = tape.gather_rows(enc_out, Arc::new(vec![0, n - 1]))?;
        let flat = tape.reshape(ends, &[1, 2 * d])?;
        self.heads.cls.forward(tape, store, flat)
    }

    /// Encoder plus classification head over the whole, unmasked image.
    pub fn classify_image<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Var> {
        let tokens = self.embed(tape, store, image)?;
        let enc = self.encode(tape, store, tokens)?;
        self.classify(tape, store, enc)
    }

    /// Per-slot depth values, `N × P²`.
    pub fn depth<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var) -> Result<Var> {
        self.heads.depth.forward(tape, store, hidden)
    }

    /// Per-slot segmentation logits, `N × (P²·K)` with the class fastest.
    pub fn seg<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, hidden: Var) -> Result<Var> {
        self.heads.seg.forward(tape, store, hidden)
    }

    /// Reassembles per-slot values (`N × P²·c`, serialized) into a `c×H×W`
    /// map.
    pub fn unpatchify_slots<T: Real>(&self, slots: &Tensor<T>, channels: usize) -> Result<Tensor<T>> {
        let c = &self.cfg;
        let width = c.patch * c.patch * channels;
        if slots.shape() != [self.plan.len(), width] {
            return Err(Error::Geometry(format!(
                "slot map {:?} does not match {} slots of width {width}",
                slots.shape(),
                self.plan.len()
            )));
        }
        let inv = self.plan.inverse();
        let mut raster = Vec::with_capacity(slots.len());
        for &slot in &inv {
            raster.extend_from_slice(slots.row(slot));
        }
        let grid = PatchGrid {
            patches: Tensor::matrix(self.plan.len(), width, raster)?,
            grid_h: c.grid_h(),
            grid_w: c.grid_w(),
            patch: c.patch,
            channels,
        };
        unpatchify(&grid, c.patch, channels, c.image_h, c.image_w)
    }

    /// Names of parameters that belong to the encoder path (embedding and
    /// mLSTM blocks).
    pub fn is_encoder_param(name: &str) -> bool {
        name.starts_with("embed.") || name.starts_with("enc.")
    }

    pub fn is_decoder_param(name: &str) -> bool {
        name.starts_with("dec.")
    }
}
