use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use mal_core::config::RunConfig;
use mal_core::data::{gen_synthetic, load_dataset, Dataset, Manifest, Task};
use mal_core::model::MalModel;
use mal_core::numerics::{write_tensor, GradCheckOptions, ParamStore};
use mal_core::train::{
    attention_mask, check_model_gradients, evaluate, run_stage, Checkpoint, MetricsWriter, StageKind,
};

#[derive(Parser)]
#[command(name = "mal", version, about = "Cluster-masked AR pretraining for an mLSTM vision encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (or file, for dump-mask).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint to initialize from or evaluate.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Stage whose settings apply: ar_pretrain, multitask_pretrain, finetune.
    #[arg(long)]
    stage: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    /// ar, depth, seg or classify.
    #[arg(long)]
    task: String,
    /// Training images.
    #[arg(long, default_value_t = 8)]
    n: usize,
    /// Held-out images.
    #[arg(long, default_value_t = 0)]
    n_test: usize,
    /// Image side; defaults to the configured model input.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: autoregressive pretraining.
    PretrainAr(Common),
    /// Stage 2: depth and segmentation with the autoregressive loss.
    PretrainMt(Common),
    /// Stage 3: classification finetuning.
    Finetune(Common),
    /// Evaluate a checkpoint on a stage's held-out split.
    Eval(Common),
    /// Full-model finite-difference gradient check in 64-bit.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Entries checked per parameter; all when omitted.
        #[arg(long)]
        max_entries: Option<usize>,
    },
    /// Render a synthetic dataset with a manifest.
    GenData(GenArgs),
    /// Write the decoder attention mask as a MALTNSR1 tensor.
    DumpMask(Common),
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn manifest_split(path: &Path, split: &str) -> Result<Dataset> {
    let m = Manifest::load(path)?;
    Ok(load_dataset(&m, split)?)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| anyhow!("the configuration does not set `{what}`"))
}

fn stage_data(cfg: &RunConfig, kind: StageKind, split_of: impl Fn(&mal_core::config::StageSettings) -> String) -> Result<Vec<Dataset>> {
    let s = kind.settings(cfg);
    let split = split_of(s);
    let name = kind.name();
    Ok(match kind {
        StageKind::MultitaskPretrain => vec![
            manifest_split(required(&s.depth_data, &format!("{name}.depth_data"))?, &split)?,
            manifest_split(required(&s.seg_data, &format!("{name}.seg_data"))?, &split)?,
        ],
        _ => vec![manifest_split(required(&s.data, &format!("{name}.data"))?, &split)?],
    })
}

fn train(kind: StageKind, c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let init = c.ckpt.as_deref().map(Checkpoint::load).transpose()?;
    match (kind, &init) {
        (StageKind::MultitaskPretrain, None) => bail!("pretrain-mt needs --ckpt from pretrain-ar"),
        (StageKind::Finetune, None) => warn!("no --ckpt given; finetuning from random initialization"),
        _ => {}
    }
    let data = stage_data(&cfg, kind, |s| s.train_split.clone())?;
    let refs: Vec<&Dataset> = data.iter().collect();
    let dir = out_dir(c)?;
    let mut writer = MetricsWriter::create(&dir.join("metrics.jsonl"))?;
    info!("{}: {} steps per epoch", kind.name(), refs.iter().map(|d| d.len().div_ceil(kind.settings(&cfg).batch_size)).sum::<usize>());
    let trained = run_stage(&cfg, kind, &refs, init.as_ref(), |r| writer.write(r))?;
    writer.finish()?;
    let ck_path = dir.join(format!("{}.ckpt", kind.name()));
    trained.checkpoint().save(&ck_path)?;
    if let (Some(first), Some(last)) = (trained.records.first(), trained.records.last()) {
        println!(
            "{}: {} steps, loss {:.6} -> {:.6}, checkpoint {}",
            kind.name(),
            trained.records.len(),
            first.loss,
            last.loss,
            ck_path.display()
        );
    }
    if kind == StageKind::Finetune {
        let s = &cfg.finetune;
        let m = Manifest::load(required(&s.data, "finetune.data")?)?;
        if m.splits.contains_key(&s.eval_split) {
            let ds = load_dataset(&m, &s.eval_split)?;
            let report = evaluate(&cfg, &trained.model, &trained.eval_store(), &ds)?;
            println!("{}", serde_json::to_string(&report)?);
        }
    }
    Ok(())
}

fn eval(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let kind = match &c.stage {
        Some(s) => StageKind::parse(s).ok_or_else(|| anyhow!("unknown stage `{s}`"))?,
        None => StageKind::Finetune,
    };
    let ck = Checkpoint::load(c.ckpt.as_deref().ok_or_else(|| anyhow!("eval needs --ckpt"))?)?;
    ck.check_fingerprint(&cfg.model.fingerprint())?;
    let (model, mut store): (MalModel, ParamStore<f32>) = MalModel::new(&cfg.model, 0)?;
    let role = if ck.has_role("ema") { "ema" } else { "param" };
    ck.restore(role, &mut store, |_| true)?;
    for ds in stage_data(&cfg, kind, |s| s.eval_split.clone())? {
        let report = evaluate(&cfg, &model, &store, &ds)?;
        println!("{}", serde_json::to_string(&report)?);
    }
    Ok(())
}

fn gradcheck(c: &Common, max_entries: Option<usize>) -> Result<()> {
    let cfg = load_config(c)?;
    let opts = GradCheckOptions {
        max_entries,
        ..Default::default()
    };
    let report = check_model_gradients(&cfg.model, cfg.seed, opts)?;
    for p in &report.params {
        info!("{:<28} max rel err {:.3e} over {} entries", p.name, p.max_rel_err, p.checked);
    }
    println!(
        "gradcheck: {} parameters, max relative error {:.3e} (tol {:.0e})",
        report.params.len(),
        report.max_rel_err(),
        report.tol
    );
    if !report.passed() {
        let worst: Vec<String> = report.failures().map(|p| p.name.clone()).collect();
        bail!("gradient check failed for {}", worst.join(", "));
    }
    Ok(())
}

fn gen_data(a: &GenArgs) -> Result<()> {
    let task = Task::parse(&a.task).ok_or_else(|| anyhow!("unknown task `{}` (ar, depth, seg, classify)", a.task))?;
    let cfg = load_config(&a.common)?;
    let size = a.size.unwrap_or(cfg.model.image_h);
    if size % cfg.model.patch != 0 {
        return Err(mal_core::Error::Geometry(format!("image size {size} is not divisible by patch {}", cfg.model.patch)).into());
    }
    let dir = out_dir(&a.common)?;
    let m = gen_synthetic(task, a.n, a.n_test, size, cfg.seed, &dir)?;
    println!(
        "wrote {} {} images to {}",
        m.splits.values().map(Vec::len).sum::<usize>(),
        task.name(),
        dir.join("manifest.json").display()
    );
    Ok(())
}

fn dump_mask(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let plan = cfg.model.plan()?;
    let mask = attention_mask(&plan, cfg.mask.attention)?;
    let path = match &c.out {
        Some(p) if p.extension().is_some() => {
            if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            p.clone()
        }
        _ => out_dir(c)?.join("mask.tnsr"),
    };
    write_tensor(&path, &mask.to_tensor::<f32>())?;
    let n = mask.len();
    if n <= 16 {
        for i in 0..n {
            let row: Vec<&str> = (0..n).map(|j| if mask.allows(i, j) { "0" } else { "-inf" }).collect();
            println!("[{}]", row.join(", "));
        }
    }
    println!("wrote {n}x{n} mask to {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PretrainAr(c) => train(StageKind::ArPretrain, &c),
        Command::PretrainMt(c) => train(StageKind::MultitaskPretrain, &c),
        Command::Finetune(c) => train(StageKind::Finetune, &c),
        Command::Eval(c) => eval(&c),
        Command::Gradcheck { common, max_entries } => gradcheck(&common, max_entries),
        Command::GenData(a) => gen_data(&a),
        Command::DumpMask(c) => dump_mask(&c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.downcast_ref::<mal_core::Error>().map_or("usage", mal_core::Error::class);
            eprintln!("error[{class}]: {e:#}");
            ExitCode::from(2)
        }
    }
}
