//! Optimizer, schedule, EMA, augmentation, checkpoints, metrics, and the
//! three training stages.

mod augment;
mod check;
mod checkpoint;
mod ema;
mod metrics;
mod optim;
mod schedule;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{Attention, RunConfig, StageSettings};
use crate::data::{Dataset, Sample, Task};
use crate::error::{Error, Result};
use crate::masking::{causal_content_mask, cluster_block_mask, ratio_selection, AttnMask, MaskSelection};
use crate::model::{DecodeOutput, MalModel};
use crate::numerics::{Grads, ParamStore, Tape, Tensor, Var};
use crate::objectives::{ar_loss_on_tape, depth_loss_on_tape, multitask_on_tape, seg_loss_on_tape};
use crate::serialize::{patchify, slot_targets, ClusterPlan, TargetNorm};

pub use augment::{augment, AugmentConfig, CropFlip};
pub use check::{check_model_gradients, check_objective, CheckCase};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use ema::EmaState;
pub use metrics::{read_metrics, MetricRecord, MetricsWriter};
pub use optim::{adamw_step, AdamWConfig, OptimState};
pub use schedule::{scaled_lr, Schedule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StageKind {
    /// Autoregressive reconstruction only.
    ArPretrain,
    /// Depth and segmentation batches in turn, each paired with the AR loss.
    MultitaskPretrain,
    /// Classification from the unmasked encoder.
    Finetune,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [StageKind::ArPretrain, StageKind::MultitaskPretrain, StageKind::Finetune];

    pub fn name(self) -> &'static str {
        match self {
            StageKind::ArPretrain => "ar_pretrain",
            StageKind::MultitaskPretrain => "multitask_pretrain",
            StageKind::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    pub fn settings(self, cfg: &RunConfig) -> &StageSettings {
        match self {
            StageKind::ArPretrain => &cfg.ar_pretrain,
            StageKind::MultitaskPretrain => &cfg.multitask_pretrain,
            StageKind::Finetune => &cfg.finetune,
        }
    }

    fn id(self) -> u64 {
        self as u64 + 1
    }
}

/// Result of one stage: final weights, optimizer and EMA state, and the
/// emitted metric records.
pub struct Trained {
    pub model: MalModel,
    pub store: ParamStore<f32>,
    pub opt: OptimState<f32>,
    pub ema: EmaState<f32>,
    pub records: Vec<MetricRecord>,
}

impl Trained {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(self.model.cfg.fingerprint(), &self.store, Some(&self.opt), Some(&self.ema))
    }

    /// Parameters used for evaluation.
    pub fn eval_store(&self) -> ParamStore<f32> {
        self.ema.apply(&self.store)
    }
}

/// Worker pool sized by `MAL_THREADS`, or by the machine when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("MAL_THREADS") {
        match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => b = b.num_threads(n),
            _ => return Err(Error::Config(vec![format!("MAL_THREADS `{v}` must be a positive integer")])),
        }
    }
    b.build().map_err(|e| Error::Config(vec![format!("cannot start worker pool: {e}")]))
}

fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x243f_6a88_85a3_08d3u64;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Decoder attention for masked passes.
pub fn attention_mask(plan: &ClusterPlan, kind: Attention) -> Result<AttnMask> {
    match kind {
        Attention::BlockCausal => cluster_block_mask(plan),
        Attention::Causal => causal_content_mask(plan.len()),
        Attention::Full => AttnMask::full(plan.len()),
    }
}

/// Per-pixel labels regrouped by serialized slot, pixels row-major within a
/// patch, matching the segmentation head's layout.
pub fn slot_labels(model: &MalModel, labels: &[usize]) -> Vec<usize> {
    let c = &model.cfg;
    let (p, gw, w) = (c.patch, c.grid_w(), c.image_w);
    let mut out = Vec::with_capacity(labels.len());
    for &r in model.plan.perm.iter() {
        let (gy, gx) = (r / gw, r % gw);
        for py in 0..p {
            for px in 0..p {
                out.push(labels[(gy * p + py) * w + gx * p + px]);
            }
        }
    }
    out
}

/// Depth map regrouped by serialized slot: `N × P²`.
fn depth_slots(model: &MalModel, depth: &Tensor<f32>) -> Result<Tensor<f32>> {
    slot_targets(&patchify(depth, model.cfg.patch)?, &model.plan, TargetNorm::Raw)
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    model: &'a MalModel,
    mask: Tensor<f32>,
    augment: bool,
}

struct SampleOut {
    grads: Grads<f32>,
    loss: f64,
    components: Vec<(&'static str, f64)>,
}

impl Ctx<'_> {
    fn masked_pass(
        &self,
        tape: &mut Tape<f32>,
        store: &ParamStore<f32>,
        img: &Tensor<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(DecodeOutput, Var)> {
        let m = &self.cfg.mask;
        let sel = ratio_selection(&self.model.plan, m.ratio, m.granularity, rng.gen())?;
        let out = self.model.forward_masked(tape, store, img, &sel, &self.mask)?;
        let grid = self.model.patchify(img)?;
        let targets = slot_targets(&grid, &self.model.plan, m.target_norm)?;
        let ar = ar_loss_on_tape(tape, out.preds, &targets, &sel.masked)?;
        Ok((out, ar))
    }

    fn crop(&self, rng: &mut ChaCha8Rng) -> CropFlip {
        let c = &self.model.cfg;
        if self.augment {
            CropFlip::sample(&self.cfg.augment, c.image_h, c.image_w, rng)
        } else {
            CropFlip::identity(c.image_h, c.image_w)
        }
    }

    fn sample_grad(&self, kind: StageKind, store: &ParamStore<f32>, s: &Sample, task: Task, seed: u64) -> Result<SampleOut> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (self.model.cfg.image_h, self.model.cfg.image_w);
        let crop = self.crop(&mut rng);
        let img = crop.apply(&s.image, h, w)?;
        let mut tape = Tape::new();
        let mut comps = Vec::new();
        let loss = match kind {
            StageKind::ArPretrain => {
                let (_, ar) = self.masked_pass(&mut tape, store, &img, &mut rng)?;
                comps.push(("ar", tape.value(ar).data()[0] as f64));
                ar
            }
            StageKind::MultitaskPretrain => {
                let (out, ar) = self.masked_pass(&mut tape, store, &img, &mut rng)?;
                let (name, task_loss) = match task {
                    Task::Depth => {
                        let d = s.depth.as_ref().ok_or_else(|| Error::Dataset("depth sample without target".into()))?;
                        let target = depth_slots(self.model, &crop.apply(d, h, w)?)?;
                        let pred = self.model.depth(&mut tape, store, out.hidden)?;
                        ("depth", depth_loss_on_tape(&mut tape, pred, &target)?)
                    }
                    Task::Seg => {
                        let l = s.seg.as_ref().ok_or_else(|| Error::Dataset("seg sample without target".into()))?;
                        let labels = slot_labels(self.model, &crop.apply_labels(l, h, w, h, w)?);
                        let logits = self.model.seg(&mut tape, store, out.hidden)?;
                        let flat = tape.reshape(logits, &[labels.len(), self.model.cfg.seg_classes])?;
                        ("seg", seg_loss_on_tape(&mut tape, flat, Arc::new(labels))?)
                    }
                    t => return Err(Error::Dataset(format!("multi-task stage cannot train on `{}` data", t.name()))),
                };
                comps.push((name, tape.value(task_loss).data()[0] as f64));
                comps.push(("ar", tape.value(ar).data()[0] as f64));
                multitask_on_tape(&mut tape, task_loss, ar, self.cfg.loss)?
            }
            StageKind::Finetune => {
                let label = s.label.ok_or_else(|| Error::Dataset("classification sample without label".into()))?;
                let logits = self.model.classify_image(&mut tape, store, &img)?;
                let ce = tape.cross_entropy(logits, Arc::new(vec![label]))?;
                comps.push(("cls", tape.value(ce).data()[0] as f64));
                ce
            }
        };
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{} loss", kind.name())));
        }
        let grads = tape.backward(loss, store.len())?;
        Ok(SampleOut {
            grads,
            loss: value,
            components: comps,
        })
    }
}

fn check_images(ds: &Dataset, model: &MalModel) -> Result<()> {
    let c = &model.cfg;
    if ds.is_empty() {
        return Err(Error::Dataset(format!("`{}` dataset is empty", ds.task.name())));
    }
    let want = [c.channels, c.image_h, c.image_w];
    if let Some(s) = ds.samples.iter().find(|s| s.image.shape() != want) {
        return Err(Error::Geometry(format!(
            "dataset image {:?} does not match model input {want:?}",
            s.image.shape()
        )));
    }
    if ds.task == Task::Classify {
        for s in &ds.samples {
            match s.label {
                Some(l) if l < c.num_classes => {}
                Some(l) => return Err(Error::Label { label: l, classes: c.num_classes }),
                None => return Err(Error::Dataset("classification sample without label".into())),
            }
        }
    }
    Ok(())
}

/// Datasets a stage trains on, in the order its batches are drawn.
fn stage_datasets<'a>(kind: StageKind, data: &[&'a Dataset]) -> Result<Vec<&'a Dataset>> {
    let find = |t: Task| data.iter().copied().find(|d| d.task == t);
    let need = |t: Task| find(t).ok_or_else(|| Error::Dataset(format!("{} stage needs a `{}` dataset", kind.name(), t.name())));
    match kind {
        StageKind::ArPretrain => data
            .first()
            .map(|d| vec![*d])
            .ok_or_else(|| Error::Dataset("ar_pretrain stage needs a dataset".into())),
        StageKind::MultitaskPretrain => Ok(vec![need(Task::Depth)?, need(Task::Seg)?]),
        StageKind::Finetune => Ok(vec![need(Task::Classify)?]),
    }
}

/// Trains one stage.
///
/// `init` seeds the parameters: the whole model for the pretraining stages,
/// the encoder path only for finetuning. Optimizer state starts fresh.
/// Every metric record is passed to `sink` as soon as its step finishes.
pub fn run_stage(
    cfg: &RunConfig,
    kind: StageKind,
    data: &[&Dataset],
    init: Option<&Checkpoint>,
    mut sink: impl FnMut(&MetricRecord) -> Result<()>,
) -> Result<Trained> {
    cfg.validate()?;
    let settings = kind.settings(cfg);
    let (model, mut store) = MalModel::new::<f32>(&cfg.model, mix(&[cfg.seed, 0]))?;
    let sets = stage_datasets(kind, data)?;
    for ds in &sets {
        check_images(ds, &model)?;
    }
    if let Some(ck) = init {
        ck.check_fingerprint(&cfg.model.fingerprint())?;
        match kind {
            StageKind::Finetune => ck.restore("param", &mut store, MalModel::is_encoder_param)?,
            _ => ck.restore("param", &mut store, |_| true)?,
        };
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id);
        let trainable = match kind {
            StageKind::Finetune => {
                name.starts_with("head.cls.") || (!settings.linear_probe && MalModel::is_encoder_param(name))
            }
            _ => !name.starts_with("head.cls."),
        };
        store.set_trainable(id, trainable);
    }
    let mut opt = OptimState::new(&store, cfg.optim);
    let mut ema = EmaState::new(&store, cfg.ema_decay);
    let b = settings.batch_size;
    let spe: usize = sets.iter().map(|d| d.len().div_ceil(b)).sum();
    let schedule = Schedule::new(settings.blr, b, settings.warmup_epochs, settings.epochs, spe);
    let ctx = Ctx {
        cfg,
        model: &model,
        mask: attention_mask(&model.plan, cfg.mask.attention)?.to_tensor(),
        augment: settings.augment && cfg.augment.enabled,
    };
    let pool = worker_pool()?;
    let started = Instant::now();
    let mut records = Vec::new();
    let mut step = 0usize;
    for epoch in 0..settings.epochs {
        // Round-robin over datasets: one batch from each in turn.
        let mut per_set: Vec<Vec<Vec<usize>>> = sets
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let mut order: Vec<usize> = (0..d.len()).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(&[cfg.seed, kind.id(), epoch as u64, k as u64])));
                order.chunks(b).map(<[usize]>::to_vec).collect()
            })
            .collect();
        let rounds = per_set.iter().map(Vec::len).max().unwrap_or(0);
        let mut batches = Vec::with_capacity(spe);
        for r in 0..rounds {
            for (k, list) in per_set.iter_mut().enumerate() {
                if r < list.len() {
                    batches.push((k, std::mem::take(&mut list[r])));
                }
            }
        }
        for (k, batch) in batches {
            let lr = schedule.lr_at(step)?;
            let ds = sets[k];
            let outs: Vec<Result<SampleOut>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let seed = mix(&[cfg.seed, kind.id(), epoch as u64, k as u64, i as u64]);
                        ctx.sample_grad(kind, &store, &ds.samples[i], ds.task, seed)
                    })
                    .collect()
            });
            let mut grads = Grads::empty(store.len());
            let mut loss = 0.0;
            let mut comps: BTreeMap<String, f64> = BTreeMap::new();
            for out in outs {
                let out = out?;
                grads.add_assign(&out.grads);
                loss += out.loss;
                for (name, v) in out.components {
                    *comps.entry(name.to_string()).or_default() += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            grads.scale(inv as f32);
            adamw_step(&mut store, &grads, &mut opt, lr)?;
            ema.update(&store);
            step += 1;
            for v in comps.values_mut() {
                *v *= inv;
            }
            let rec = MetricRecord {
                step: opt.step,
                epoch,
                stage: kind.name().to_string(),
                loss: loss * inv,
                components: comps,
                lr,
                wall_ms: cfg.metrics.wall_clock.then(|| started.elapsed().as_millis() as u64),
            };
            log::debug!("{} step {} loss {:.6} lr {:.3e}", rec.stage, rec.step, rec.loss, lr);
            sink(&rec)?;
            records.push(rec);
        }
    }
    Ok(Trained {
        model,
        store,
        opt,
        ema,
        records,
    })
}

/// Held-out metrics; each field is present when the dataset carries the
/// matching targets.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct EvalReport {
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_rmse: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seg_miou: Option<f64>,
    /// Mean reconstruction loss under the configured masking, for datasets
    /// without targets.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ar_loss: Option<f64>,
}

#[derive(Default)]
struct EvalAcc {
    correct: usize,
    labelled: usize,
    sq_err: f64,
    depth_px: usize,
    inter: Vec<usize>,
    union: Vec<usize>,
    ar: f64,
    ar_n: usize,
}

fn argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |best, k| if row[k] > row[best] { k } else { best })
}

fn eval_sample(ctx: &Ctx, store: &ParamStore<f32>, s: &Sample, seed: u64) -> Result<EvalAcc> {
    let model = ctx.model;
    let k = model.cfg.seg_classes;
    let mut acc = EvalAcc {
        inter: vec![0; k],
        union: vec![0; k],
        ..Default::default()
    };
    if let Some(label) = s.label {
        let mut tape = Tape::new();
        let logits = model.classify_image(&mut tape, store, &s.image)?;
        acc.labelled = 1;
        acc.correct = usize::from(argmax(tape.value(logits).data()) == label);
    }
    if s.depth.is_some() || s.seg.is_some() {
        let mut tape = Tape::new();
        let sel = MaskSelection::none(model.plan.len());
        let out = model.forward_masked(&mut tape, store, &s.image, &sel, &ctx.mask)?;
        if let Some(d) = &s.depth {
            let target = depth_slots(model, d)?;
            let pred = model.depth(&mut tape, store, out.hidden)?;
            for (a, b) in tape.value(pred).data().iter().zip(target.data()) {
                acc.sq_err += ((a - b) as f64).powi(2);
            }
            acc.depth_px = target.len();
        }
        if let Some(l) = &s.seg {
            let truth = slot_labels(model, l);
            let logits = model.seg(&mut tape, store, out.hidden)?;
            for (row, &t) in tape.value(logits).data().chunks(k).zip(&truth) {
                let p = argmax(row);
                if p == t {
                    acc.inter[t] += 1;
                    acc.union[t] += 1;
                } else {
                    acc.union[t] += 1;
                    acc.union[p] += 1;
                }
            }
        }
    }
    if s.label.is_none() && s.depth.is_none() && s.seg.is_none() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, ar) = ctx.masked_pass(&mut tape, store, &s.image, &mut rng)?;
        acc.ar = tape.value(ar).data()[0] as f64;
        acc.ar_n = 1;
    }
    Ok(acc)
}

/// Classification accuracy, depth RMSE, segmentation mean IoU, or masked
/// reconstruction loss over `ds`, depending on which targets it has.
pub fn evaluate(cfg: &RunConfig, model: &MalModel, store: &ParamStore<f32>, ds: &Dataset) -> Result<EvalReport> {
    check_images(ds, model)?;
    let ctx = Ctx {
        cfg,
        model,
        mask: attention_mask(&model.plan, cfg.mask.attention)?.to_tensor(),
        augment: false,
    };
    let pool = worker_pool()?;
    let parts: Vec<Result<EvalAcc>> = pool.install(|| {
        ds.samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| eval_sample(&ctx, store, s, mix(&[cfg.seed, 99, i as u64])))
            .collect()
    });
    let k = model.cfg.seg_classes;
    let mut tot = EvalAcc {
        inter: vec![0; k],
        union: vec![0; k],
        ..Default::default()
    };
    for p in parts {
        let p = p?;
        tot.correct += p.correct;
        tot.labelled += p.labelled;
        tot.sq_err += p.sq_err;
        tot.depth_px += p.depth_px;
        tot.ar += p.ar;
        tot.ar_n += p.ar_n;
        for c in 0..k {
            tot.inter[c] += p.inter[c];
            tot.union[c] += p.union[c];
        }
    }
    let present: Vec<usize> = (0..k).filter(|&c| tot.union[c] > 0).collect();
    Ok(EvalReport {
        samples: ds.len(),
        accuracy: (tot.labelled > 0).then(|| tot.correct as f64 / tot.labelled as f64),
        depth_rmse: (tot.depth_px > 0).then(|| (tot.sq_err / tot.depth_px as f64).sqrt()),
        seg_miou: (!present.is_empty())
            .then(|| present.iter().map(|&c| tot.inter[c] as f64 / tot.union[c] as f64).sum::<f64>() / present.len() as f64),
        ar_loss: (tot.ar_n > 0).then(|| tot.ar / tot.ar_n as f64),
    })
}
