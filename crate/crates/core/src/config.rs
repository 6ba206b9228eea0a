//! Run configuration, read from TOML. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::{ContrastiveKind, DownstreamLoss, MultiTaskMode, BARLOW_LAMBDA_OFF};
use crate::data::DataConfig;
use crate::encoders::{EncoderConfig, ImageConfig, TabularConfig};
use crate::error::{Error, Result};
use crate::mtm::DEFAULT_MASK_PROB;
use crate::optim::{AdamConfig, OneCycle};
use crate::scalar::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    MtmMask,
    MtmFeature,
    Mmcl,
    MtCmtm,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::MtmMask, Strategy::MtmFeature, Strategy::Mmcl, Strategy::MtCmtm];

    pub fn uses_images(self) -> bool {
        matches!(self, Strategy::Mmcl | Strategy::MtCmtm)
    }

    pub fn key(self) -> &'static str {
        match self {
            Strategy::MtmMask => "mtm_mask",
            Strategy::MtmFeature => "mtm_feature",
            Strategy::Mmcl => "mmcl",
            Strategy::MtCmtm => "mt_cmtm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tabular: TabularConfig,
    pub image: ImageConfig,
    pub projection_dim: usize,
    pub temperature: f64,
    /// Bernoulli probability of corrupting a feature.
    pub mask_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let e = EncoderConfig::default();
        ModelConfig {
            tabular: e.tabular,
            image: e.image,
            projection_dim: e.projection_dim,
            temperature: e.temperature,
            mask_prob: DEFAULT_MASK_PROB,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            tabular: self.tabular.clone(),
            image: self.image.clone(),
            projection_dim: self.projection_dim,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub strategy: Strategy,
    pub epochs: usize,
    pub contrastive: ContrastiveKind,
    pub multitask: MultiTaskMode,
    /// Weights of the contrastive and mask losses in `fixed` mode.
    pub lambda_c: f64,
    pub lambda_m: f64,
    pub barlow_lambda: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            strategy: Strategy::MtCmtm,
            epochs: 25,
            contrastive: ContrastiveKind::InfoNce,
            multitask: MultiTaskMode::Uncertainty,
            lambda_c: 0.5,
            lambda_m: 0.5,
            barlow_lambda: BARLOW_LAMBDA_OFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Defaults to `l1` for regression and `ce` for classification.
    pub loss: Option<DownstreamLoss>,
    pub epochs: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { loss: None, epochs: 50 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    OneCycle,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub weight_decay: f64,
    pub decoupled_weight_decay: bool,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        let s = OneCycle::default();
        OptimConfig {
            lr: 1e-2,
            weight_decay: a.weight_decay,
            decoupled_weight_decay: a.decoupled,
            batch_size: 64,
            schedule: Schedule::OneCycle,
            pct_start: s.pct_start,
            div_factor: s.div_factor,
            final_div_factor: s.final_div_factor,
        }
    }
}

impl OptimConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            decoupled: self.decoupled_weight_decay,
            ..AdamConfig::default()
        }
    }

    pub fn onecycle(&self) -> OneCycle {
        OneCycle {
            pct_start: self.pct_start,
            div_factor: self.div_factor,
            final_div_factor: self.final_div_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub seeds: Vec<u64>,
    /// Falls back to `$MTCMTM_OUT`, then `runs`.
    pub out_dir: Option<PathBuf>,
    pub precision: Precision,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            seeds: vec![0],
            out_dir: None,
            precision: Precision::F32,
        }
    }
}

pub const OUT_ENV: &str = "MTCMTM_OUT";

impl RunSettings {
    /// `flag`, then `out_dir`, then `$MTCMTM_OUT`, then `runs`.
    pub fn resolve_out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub optim: OptimConfig,
    pub run: RunSettings,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg =
            Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = path.parent() {
            for p in [&mut cfg.data.csv, &mut cfg.data.schema] {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    /// `<command>-<hash>`, a pure function of the command and config.
    pub fn run_id(&self, command: &str) -> String {
        let hash = crate::checkpoint::config_hash(self);
        format!("{command}-{}", &hash[..12])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.encoder().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.model.mask_prob > 0.0 && self.model.mask_prob < 1.0) {
            return bad(format!("model.mask_prob must be in (0, 1), got {}", self.model.mask_prob));
        }
        if self.pretrain.epochs == 0 || self.finetune.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.optim.batch_size < 2 {
            return bad("optim.batch_size must be >= 2".into());
        }
        if !(self.optim.lr > 0.0) || self.optim.weight_decay < 0.0 {
            return bad("optim.lr must be > 0 and weight_decay >= 0".into());
        }
        if self.run.seeds.is_empty() {
            return bad("run.seeds must list at least one seed".into());
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction <= 1.0) {
            return bad(format!("data.train_fraction must be in (0, 1], got {}", self.data.train_fraction));
        }
        Ok(())
    }
}
