//! Finite-difference check of every model parameter through every loss.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::masking::{cluster_block_mask, ratio_selection, Granularity};
use crate::model::{MalModel, ModelConfig};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, ParamStore, Tape, Tensor, Var};
use crate::objectives::{ar_loss_on_tape, depth_loss_on_tape, seg_loss_on_tape};
use crate::serialize::{slot_targets, TargetNorm};

/// Random inputs and targets for [`check_objective`].
pub struct CheckCase {
    pub image: Tensor<f64>,
    pub depth: Tensor<f64>,
    pub seg: Arc<Vec<usize>>,
    pub label: usize,
    pub mask_seed: u64,
}

impl CheckCase {
    pub fn random(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = cfg.num_patches();
        let p2 = cfg.patch * cfg.patch;
        Self {
            image: Tensor::from_fn(&[cfg.channels, cfg.image_h, cfg.image_w], |_| rng.gen_range(-1.0..1.0)),
            depth: Tensor::from_fn(&[n, p2], |_| rng.gen_range(0.0..1.0)),
            seg: Arc::new((0..n * p2).map(|_| rng.gen_range(0..cfg.seg_classes)).collect()),
            label: rng.gen_range(0..cfg.num_classes),
            mask_seed: rng.gen(),
        }
    }
}

/// Sum of the masked reconstruction, depth, segmentation and classification
/// losses for one image.
pub fn check_objective(model: &MalModel, tape: &mut Tape<f64>, store: &ParamStore<f64>, case: &CheckCase) -> Result<Var> {
    let sel = ratio_selection(&model.plan, 0.25, Granularity::Cluster, case.mask_seed)?;
    let mask = cluster_block_mask(&model.plan)?.to_tensor();
    let out = model.forward_masked(tape, store, &case.image, &sel, &mask)?;
    let targets = slot_targets(&model.patchify(&case.image)?, &model.plan, TargetNorm::PerPatch)?;
    let ar = ar_loss_on_tape(tape, out.preds, &targets, &sel.masked)?;
    let depth = model.depth(tape, store, out.hidden)?;
    let dl = depth_loss_on_tape(tape, depth, &case.depth)?;
    let seg = model.seg(tape, store, out.hidden)?;
    let seg = tape.reshape(seg, &[case.seg.len(), model.cfg.seg_classes])?;
    let sl = seg_loss_on_tape(tape, seg, case.seg.clone())?;
    let logits = model.classify_image(tape, store, &case.image)?;
    let cl = tape.cross_entropy(logits, Arc::new(vec![case.label]))?;
    let a = tape.add(ar, dl)?;
    let b = tape.add(sl, cl)?;
    tape.add(a, b)
}

/// Builds a 64-bit model from `cfg`, perturbs every parameter away from its
/// structured initialization, and compares tape gradients against central
/// differences.
pub fn check_model_gradients(cfg: &ModelConfig, seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let (model, mut store) = MalModel::new::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    let case = CheckCase::random(cfg, seed.wrapping_add(1));
    grad_check(|tape, s| check_objective(&model, tape, s, &case), &store, opts)
}
