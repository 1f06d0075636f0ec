//! Run configuration, read from TOML.
//!
//! Every section is optional; omitted keys take their defaults. Relative
//! dataset paths resolve against the directory of the config file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{masked_token_count, Granularity};
use crate::model::ModelConfig;
use crate::objectives::LossWeights;
use crate::serialize::TargetNorm;
use crate::train::{AdamWConfig, AugmentConfig};

/// Decoder attention pattern during masked passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attention {
    /// Full within a cluster, causal across clusters.
    #[default]
    BlockCausal,
    /// Token-level causal.
    Causal,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub granularity: Granularity,
    pub ratio: f64,
    pub attention: Attention,
    pub target_norm: TargetNorm,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::Cluster,
            ratio: 0.2,
            attention: Attention::BlockCausal,
            target_norm: TargetNorm::PerPatch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Reference learning rate before batch scaling.
    pub blr: f64,
    pub warmup_epochs: usize,
    pub augment: bool,
    /// Finetuning only: keep the encoder fixed and train the head alone.
    pub linear_probe: bool,
    /// Main training manifest.
    pub data: Option<PathBuf>,
    /// Multi-task stage manifests.
    pub depth_data: Option<PathBuf>,
    pub seg_data: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
}

impl StageSettings {
    fn with(epochs: usize, batch_size: usize, blr: f64) -> Self {
        Self {
            epochs,
            batch_size,
            blr,
            warmup_epochs: 5,
            augment: true,
            linear_probe: false,
            data: None,
            depth_data: None,
            seg_data: None,
            train_split: "train".into(),
            eval_split: "test".into(),
        }
    }

    fn violations(&self, name: &str, v: &mut Vec<String>) {
        if self.epochs == 0 {
            v.push(format!("{name}.epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            v.push(format!("{name}.batch_size must be at least 1"));
        }
        if !(self.blr >= 0.0 && self.blr.is_finite()) {
            v.push(format!("{name}.blr {} must be finite and non-negative", self.blr));
        }
    }

    fn resolve(&mut self, dir: &Path) {
        for p in [&mut self.data, &mut self.depth_data, &mut self.seg_data].into_iter().flatten() {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

impl Default for StageSettings {
    fn default() -> Self {
        Self::with(800, 2048, 1.5e-4)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Record elapsed milliseconds per step. Off keeps seeded metric files
    /// bit-identical.
    pub wall_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub mask: MaskConfig,
    pub loss: LossWeights,
    pub optim: AdamWConfig,
    pub ema_decay: f64,
    pub augment: AugmentConfig,
    pub ar_pretrain: StageSettings,
    pub multitask_pretrain: StageSettings,
    pub finetune: StageSettings,
    pub metrics: MetricsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            mask: MaskConfig::default(),
            loss: LossWeights::default(),
            optim: AdamWConfig::default(),
            ema_decay: 0.9999,
            augment: AugmentConfig::default(),
            ar_pretrain: StageSettings::with(800, 2048, 1.5e-4),
            multitask_pretrain: StageSettings::with(800, 2048, 1.5e-4),
            finetune: StageSettings::with(200, 1024, 5e-4),
            metrics: MetricsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Small model and short schedules that run on a single CPU core.
    pub fn desk() -> Self {
        let model = ModelConfig {
            image_h: 16,
            image_w: 16,
            dim: 32,
            heads: 2,
            enc_depth: 2,
            dec_depth: 1,
            dec_width: 32,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        let stage = |epochs, blr| StageSettings {
            warmup_epochs: 1,
            augment: false,
            ..StageSettings::with(epochs, 16, blr)
        };
        Self {
            model,
            mask: MaskConfig {
                ratio: 0.75,
                ..MaskConfig::default()
            },
            ema_decay: 0.99,
            ar_pretrain: stage(30, 4e-3),
            multitask_pretrain: stage(10, 4e-3),
            finetune: StageSettings {
                warmup_epochs: 5,
                ..stage(80, 4e-2)
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    /// Parses, resolves relative paths, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for s in [&mut cfg.ar_pretrain, &mut cfg.multitask_pretrain, &mut cfg.finetune] {
            s.resolve(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every violated constraint, in a stable order.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.loss.violations());
        v.extend(self.optim.violations());
        v.extend(self.augment.violations());
        let r = self.mask.ratio;
        if !(r > 0.0 && r <= 1.0) {
            v.push(format!("mask.ratio {r} must lie in (0, 1]"));
        } else if self.model.image_h % self.model.patch.max(1) == 0
            && self.model.image_w % self.model.patch.max(1) == 0
            && masked_token_count(r, self.model.num_patches()) == 0
        {
            v.push(format!("mask.ratio {r} masks no token of {} patches", self.model.num_patches()));
        }
        if self.mask.granularity == Granularity::Pixel && self.model.patch != 1 {
            v.push("mask.granularity pixel requires model.patch = 1".into());
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            v.push(format!("ema_decay {} must lie in [0, 1]", self.ema_decay));
        }
        self.ar_pretrain.violations("ar_pretrain", &mut v);
        self.multitask_pretrain.violations("multitask_pretrain", &mut v);
        self.finetune.violations("finetune", &mut v);
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
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_desk_preset_are_valid() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn desk_file_matches_preset() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let mut cfg = RunConfig::load(&path).unwrap();
        for s in [&mut cfg.ar_pretrain, &mut cfg.multitask_pretrain, &mut cfg.finetune] {
            s.data = None;
            s.depth_data = None;
            s.seg_data = None;
        }
        assert_eq!(cfg, RunConfig::desk());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = RunConfig::desk();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[model]\ndim = 64\n[mask]\nratio = 0.5\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.dim, 64);
        assert_eq!(cfg.model.heads, ModelConfig::default().heads);
        assert_eq!(cfg.mask.ratio, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[model]\ndepth = 3\n"), Err(Error::Config(_))));
    }

    #[test]
    fn every_violation_is_listed() {
        let text = "[model]\nimage_h = 30\npatch = 4\n[mask]\nratio = 1.5\n[optim]\nbeta1 = 1.0\n[finetune]\nbatch_size = 0\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        let Err(Error::Config(v)) = cfg.validate() else { panic!("expected violations") };
        for needle in ["image height", "mask.ratio", "beta1", "finetune.batch_size"] {
            assert!(v.iter().any(|m| m.contains(needle)), "{needle} missing from {v:?}");
        }
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[ar_pretrain]\ndata = \"d/manifest.json\"\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.ar_pretrain.data.unwrap(), dir.path().join("d/manifest.json"));
    }
}
