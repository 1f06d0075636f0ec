use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mal_core::config::RunConfig;
use mal_core::model::ModelConfig;
use mal_core::numerics::read_tensor;
use mal_core::train::read_metrics;

fn mal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mal"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny model with short schedules pointed at `data`.
fn small_run(dir: &Path, data: &Path, epochs: usize, blr: f64) -> PathBuf {
    let mut cfg = RunConfig::desk();
    cfg.model = ModelConfig::tiny();
    cfg.augment.enabled = false;
    for st in [&mut cfg.ar_pretrain, &mut cfg.finetune] {
        st.epochs = epochs;
        st.batch_size = 4;
        st.blr = blr;
        st.augment = false;
        st.data = Some(data.to_path_buf());
        st.eval_split = "train".into();
    }
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn gradcheck_passes_on_the_tiny_config() {
    let cfg = configs().join("tiny.toml");
    let o = mal(&["gradcheck", "--config", s(&cfg), "--max-entries", "6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let err: f64 = out
        .split("max relative error ")
        .nth(1)
        .and_then(|r| r.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected output: {out}"));
    assert!(err <= 1e-4, "{out}");
}

#[test]
fn dump_mask_writes_the_causal_triangle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.tnsr");
    let o = mal(&["dump-mask", "--config", s(&configs().join("causal3.toml")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("[0, -inf, -inf]\n[0, 0, -inf]\n[0, 0, 0]\n"), "{}", stdout(&o));
    let t = read_tensor(&out).unwrap().into_real::<f32>();
    assert_eq!(t.shape(), &[3, 3]);
    let inf = f32::NEG_INFINITY;
    assert_eq!(t.data(), &[0.0, inf, inf, 0.0, 0.0, inf, 0.0, 0.0, 0.0]);
}

#[test]
fn invalid_config_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[model]\nimage_h = 30\npatch = 4\n[mask]\nratio = 0\n[finetune]\nepochs = 0\n").unwrap();
    let o = mal(&["gradcheck", "--config", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("error[config]"), "{err}");
    for needle in ["image height", "mask.ratio", "finetune.epochs"] {
        assert!(err.contains(needle), "{needle} missing: {err}");
    }
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("typo.toml");
    std::fs::write(&path, "[model]\ndimm = 8\n").unwrap();
    let o = mal(&["dump-mask", "--config", s(&path)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[config]"), "{}", stderr(&o));
}

#[test]
fn gen_data_rejects_sizes_off_the_patch_grid() {
    let dir = tempfile::tempdir().unwrap();
    let o = mal(&["gen-data", "--task", "ar", "--size", "18", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("error[geometry]"), "{}", stderr(&o));
}

#[test]
fn stage_two_requires_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = mal(&["pretrain-mt", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--ckpt"), "{}", stderr(&o));
}

#[test]
fn pretrain_then_finetune_then_eval() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let ar = root.join("ar");
    let o = mal(&["gen-data", "--task", "ar", "--n", "4", "--size", "16", "--seed", "1", "--out", s(&ar)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cls = root.join("cls");
    let o = mal(&["gen-data", "--task", "classify", "--n", "8", "--size", "16", "--seed", "2", "--out", s(&cls)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let ar_cfg = small_run(root, &ar.join("manifest.json"), 60, 0.2);
    let stage1 = root.join("s1");
    let o = mal(&["pretrain-ar", "--config", s(&ar_cfg), "--out", s(&stage1)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records = read_metrics(&stage1.join("metrics.jsonl")).unwrap();
    assert_eq!(records.len(), 60);
    let (first, last) = (records[0].loss, records.last().unwrap().loss);
    assert!(last < 0.5 * first, "loss {first} -> {last}");
    let ck = stage1.join("ar_pretrain.ckpt");
    assert!(ck.is_file());

    let ft_cfg = small_run(root, &cls.join("manifest.json"), 80, 0.2);
    let stage3 = root.join("s3");
    let o = mal(&["finetune", "--config", s(&ft_cfg), "--ckpt", s(&ck), "--out", s(&stage3)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ft_ck = stage3.join("finetune.ckpt");
    let o = mal(&["eval", "--config", s(&ft_cfg), "--ckpt", s(&ft_ck)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["samples"], 8);
    assert_eq!(report["accuracy"], 1.0, "{report}");
}
