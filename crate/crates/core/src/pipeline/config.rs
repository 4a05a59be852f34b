//! Run configuration: a flat JSON object with dotted keys, one per
//! hyperparameter. Unknown keys are rejected so typos can't silently
//! fall back to defaults. Paper-scale values sit in the comments; the
//! defaults are desk scale.

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::experts::StackConfig;
use crate::generator::LmConfig;
use crate::model::{LossToggles, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // model.*
    pub layers: usize,         // N: 4 (paper 12)
    pub expert_layers: usize,  // L: 3 (paper 9)
    pub dim: usize,            // D: 64 (paper 1024)
    pub heads: usize,          // 4 (paper 16)
    pub ffn_multiplier: usize, // 4
    pub frames: usize,         // F: 4
    pub image_size: usize,     // 56 (paper 224)
    pub patch_size: usize,     // 14
    pub channels: usize,       // 3
    pub proj_dim: usize,       // 16 (paper 256)
    pub d_lm: usize,           // 64 (paper 1024)
    pub lm_heads: usize,       // 4
    pub lm_enc_layers: usize,  // 2
    pub lm_dec_layers: usize,  // 2
    pub lm_max_len: usize,     // 16
    // expert.*
    pub separate_spatial_temporal: bool,
    pub experts_enabled: bool,
    // optim.*
    pub base_lr: f64,      // 1e-4 (paper value)
    pub min_lr: f64,       // 5e-5 (paper value)
    pub weight_decay: f64, // 0.01 (paper value)
    pub clip: f64,         // 1.0 (paper value)
    pub batch: usize,      // 4 (paper 48)
    // train.*
    pub stage1_max_epochs: usize, // 10 (paper value)
    pub stage2_max_epochs: usize, // 3 (paper value)
    pub stage3_max_epochs: usize, // 12 (paper value)
    pub patience: usize,          // 2 evaluations
    pub early_stop_stage1: bool,  // on
    pub early_stop_stage23: bool, // off; the later stages run their caps
    pub warmup_frac: f64,         // 0.1 of total steps
    pub seed: u64,
    pub val_frac: f64, // held-out fraction for the early-stop signal
    // loss.*
    pub stc: bool,
    pub stm: bool,
    pub vtc: bool,
    pub vtm: bool,
    pub mlm: bool,
    // data.*
    pub stage1_data: Option<PathBuf>,
    pub stage2_data: Option<PathBuf>,
    pub stage3_data: Option<PathBuf>,
    pub stage3_data_b: Option<PathBuf>, // second dialog set for domain shift
    pub vocab: Option<PathBuf>,         // default: vocab.txt next to the stage data
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            layers: 4,
            expert_layers: 3,
            dim: 64,
            heads: 4,
            ffn_multiplier: 4,
            frames: 4,
            image_size: 56,
            patch_size: 14,
            channels: 3,
            proj_dim: 16,
            d_lm: 64,
            lm_heads: 4,
            lm_enc_layers: 2,
            lm_dec_layers: 2,
            lm_max_len: 16,
            separate_spatial_temporal: true,
            experts_enabled: true,
            base_lr: 1e-4,
            min_lr: 5e-5,
            weight_decay: 0.01,
            clip: 1.0,
            batch: 4,
            stage1_max_epochs: 10,
            stage2_max_epochs: 3,
            stage3_max_epochs: 12,
            patience: 2,
            early_stop_stage1: true,
            early_stop_stage23: false,
            warmup_frac: 0.1,
            seed: 7,
            val_frac: 0.25,
            stc: true,
            stm: true,
            vtc: true,
            vtm: true,
            mlm: true,
            stage1_data: None,
            stage2_data: None,
            stage3_data: None,
            stage3_data_b: None,
            vocab: None,
            out_dir: PathBuf::from("runs"),
        }
    }
}

fn want_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| config_err(format!("key {key:?} needs a non-negative integer, got {v}")))
}

fn want_u64(key: &str, v: &Value) -> Result<u64> {
    v.as_u64()
        .ok_or_else(|| config_err(format!("key {key:?} needs a non-negative integer, got {v}")))
}

fn want_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| config_err(format!("key {key:?} needs a number, got {v}")))
}

fn want_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| config_err(format!("key {key:?} needs a boolean, got {v}")))
}

fn want_path(key: &str, v: &Value) -> Result<Option<PathBuf>> {
    match v {
        Value::Null => Ok(None),
        Value::String(s) => Ok(Some(PathBuf::from(s))),
        other => Err(config_err(format!("key {key:?} needs a string path, got {other}"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let v: Value = serde_json::from_str(text)
            .map_err(|e| config_err(format!("config is not valid JSON: {e}")))?;
        Self::from_value(&v)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_value(v: &Value) -> Result<RunConfig> {
        let obj = v
            .as_object()
            .ok_or_else(|| config_err("config must be a JSON object of dotted keys"))?;
        let mut c = RunConfig::default();
        for (k, v) in obj {
            match k.as_str() {
                "model.layers" => c.layers = want_usize(k, v)?,
                "model.expert_layers" => c.expert_layers = want_usize(k, v)?,
                "model.dim" => c.dim = want_usize(k, v)?,
                "model.heads" => c.heads = want_usize(k, v)?,
                "model.ffn_multiplier" => c.ffn_multiplier = want_usize(k, v)?,
                "model.frames" => c.frames = want_usize(k, v)?,
                "model.image_size" => c.image_size = want_usize(k, v)?,
                "model.patch_size" => c.patch_size = want_usize(k, v)?,
                "model.channels" => c.channels = want_usize(k, v)?,
                "model.proj_dim" => c.proj_dim = want_usize(k, v)?,
                "model.d_lm" => c.d_lm = want_usize(k, v)?,
                "model.lm_heads" => c.lm_heads = want_usize(k, v)?,
                "model.lm_enc_layers" => c.lm_enc_layers = want_usize(k, v)?,
                "model.lm_dec_layers" => c.lm_dec_layers = want_usize(k, v)?,
                "model.lm_max_len" => c.lm_max_len = want_usize(k, v)?,
                "expert.separate_spatial_temporal" => c.separate_spatial_temporal = want_bool(k, v)?,
                "expert.enabled" => c.experts_enabled = want_bool(k, v)?,
                "optim.base_lr" => c.base_lr = want_f64(k, v)?,
                "optim.min_lr" => c.min_lr = want_f64(k, v)?,
                "optim.weight_decay" => c.weight_decay = want_f64(k, v)?,
                "optim.clip" => c.clip = want_f64(k, v)?,
                "optim.batch" => c.batch = want_usize(k, v)?,
                "train.stage1_max_epochs" => c.stage1_max_epochs = want_usize(k, v)?,
                "train.stage2_max_epochs" => c.stage2_max_epochs = want_usize(k, v)?,
                "train.stage3_max_epochs" => c.stage3_max_epochs = want_usize(k, v)?,
                "train.patience" => c.patience = want_usize(k, v)?,
                "train.early_stop_stage1" => c.early_stop_stage1 = want_bool(k, v)?,
                "train.early_stop_stage23" => c.early_stop_stage23 = want_bool(k, v)?,
                "train.warmup_frac" => c.warmup_frac = want_f64(k, v)?,
                "train.seed" => c.seed = want_u64(k, v)?,
                "train.val_frac" => c.val_frac = want_f64(k, v)?,
                "loss.stc" => c.stc = want_bool(k, v)?,
                "loss.stm" => c.stm = want_bool(k, v)?,
                "loss.vtc" => c.vtc = want_bool(k, v)?,
                "loss.vtm" => c.vtm = want_bool(k, v)?,
                "loss.mlm" => c.mlm = want_bool(k, v)?,
                "data.stage1" => c.stage1_data = want_path(k, v)?,
                "data.stage2" => c.stage2_data = want_path(k, v)?,
                "data.stage3" => c.stage3_data = want_path(k, v)?,
                "data.stage3_b" => c.stage3_data_b = want_path(k, v)?,
                "data.vocab" => c.vocab = want_path(k, v)?,
                "data.out_dir" => {
                    c.out_dir = want_path(k, v)?
                        .ok_or_else(|| config_err("key \"data.out_dir\" cannot be null"))?
                }
                _ => return Err(config_err(format!("unknown config key {k:?}"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_lr > self.base_lr {
            return Err(config_err(format!(
                "minimum lr {} exceeds base lr {}",
                self.min_lr, self.base_lr
            )));
        }
        for (name, v) in [
            ("train.stage1_max_epochs", self.stage1_max_epochs),
            ("train.stage2_max_epochs", self.stage2_max_epochs),
            ("train.stage3_max_epochs", self.stage3_max_epochs),
        ] {
            if v == 0 {
                return Err(config_err(format!("{name} must be at least 1")));
            }
        }
        if self.patience == 0 {
            return Err(config_err("train.patience must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(config_err("train.warmup_frac must be in [0, 1)"));
        }
        if !(0.0..=0.5).contains(&self.val_frac) || self.val_frac <= 0.0 {
            return Err(config_err("train.val_frac must be in (0, 0.5]"));
        }
        if self.batch == 0 {
            return Err(config_err("optim.batch must be at least 1"));
        }
        Ok(())
    }

    /// Every key in sorted order; the canonical form behind hashing and
    /// checkpoint manifests. Parsing this map reproduces the config.
    pub fn flat_map(&self) -> BTreeMap<String, Value> {
        let path_val = |p: &Option<PathBuf>| match p {
            Some(p) => Value::String(p.display().to_string()),
            None => Value::Null,
        };
        let mut m = BTreeMap::new();
        m.insert("model.layers".into(), self.layers.into());
        m.insert("model.expert_layers".into(), self.expert_layers.into());
        m.insert("model.dim".into(), self.dim.into());
        m.insert("model.heads".into(), self.heads.into());
        m.insert("model.ffn_multiplier".into(), self.ffn_multiplier.into());
        m.insert("model.frames".into(), self.frames.into());
        m.insert("model.image_size".into(), self.image_size.into());
        m.insert("model.patch_size".into(), self.patch_size.into());
        m.insert("model.channels".into(), self.channels.into());
        m.insert("model.proj_dim".into(), self.proj_dim.into());
        m.insert("model.d_lm".into(), self.d_lm.into());
        m.insert("model.lm_heads".into(), self.lm_heads.into());
        m.insert("model.lm_enc_layers".into(), self.lm_enc_layers.into());
        m.insert("model.lm_dec_layers".into(), self.lm_dec_layers.into());
        m.insert("model.lm_max_len".into(), self.lm_max_len.into());
        m.insert(
            "expert.separate_spatial_temporal".into(),
            self.separate_spatial_temporal.into(),
        );
        m.insert("expert.enabled".into(), self.experts_enabled.into());
        m.insert("optim.base_lr".into(), self.base_lr.into());
        m.insert("optim.min_lr".into(), self.min_lr.into());
        m.insert("optim.weight_decay".into(), self.weight_decay.into());
        m.insert("optim.clip".into(), self.clip.into());
        m.insert("optim.batch".into(), self.batch.into());
        m.insert("train.stage1_max_epochs".into(), self.stage1_max_epochs.into());
        m.insert("train.stage2_max_epochs".into(), self.stage2_max_epochs.into());
        m.insert("train.stage3_max_epochs".into(), self.stage3_max_epochs.into());
        m.insert("train.patience".into(), self.patience.into());
        m.insert("train.early_stop_stage1".into(), self.early_stop_stage1.into());
        m.insert("train.early_stop_stage23".into(), self.early_stop_stage23.into());
        m.insert("train.warmup_frac".into(), self.warmup_frac.into());
        m.insert("train.seed".into(), self.seed.into());
        m.insert("train.val_frac".into(), self.val_frac.into());
        m.insert("loss.stc".into(), self.stc.into());
        m.insert("loss.stm".into(), self.stm.into());
        m.insert("loss.vtc".into(), self.vtc.into());
        m.insert("loss.vtm".into(), self.vtm.into());
        m.insert("loss.mlm".into(), self.mlm.into());
        m.insert("data.stage1".into(), path_val(&self.stage1_data));
        m.insert("data.stage2".into(), path_val(&self.stage2_data));
        m.insert("data.stage3".into(), path_val(&self.stage3_data));
        m.insert("data.stage3_b".into(), path_val(&self.stage3_data_b));
        m.insert("data.vocab".into(), path_val(&self.vocab));
        m.insert(
            "data.out_dir".into(),
            Value::String(self.out_dir.display().to_string()),
        );
        m
    }

    fn hash_of(map: &BTreeMap<String, Value>) -> String {
        let canon = serde_json::to_string(map).expect("btreemap serializes");
        let mut h = Sha256::new();
        h.update(canon.as_bytes());
        format!("{:x}", h.finalize())
    }

    /// Hash of the full configuration.
    pub fn config_hash(&self) -> String {
        Self::hash_of(&self.flat_map())
    }

    /// Hash of the architecture-defining keys only (model.* and
    /// expert.*). Cross-stage checkpoint loads check this one; data
    /// paths and schedules may differ between stages.
    pub fn model_hash(&self) -> String {
        let m: BTreeMap<String, Value> = self
            .flat_map()
            .into_iter()
            .filter(|(k, _)| k.starts_with("model.") || k.starts_with("expert."))
            .collect();
        Self::hash_of(&m)
    }

    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            stack: StackConfig {
                layers: self.layers,
                expert_layers: self.expert_layers,
                dim: self.dim,
                heads: self.heads,
                ffn_multiplier: self.ffn_multiplier,
            },
            frames: self.frames,
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: self.channels,
            proj_dim: self.proj_dim,
            lm: LmConfig {
                dim: self.d_lm,
                heads: self.lm_heads,
                enc_layers: self.lm_enc_layers,
                dec_layers: self.lm_dec_layers,
                vocab,
                max_len: self.lm_max_len,
            },
            separate_visual: self.separate_spatial_temporal,
            experts_enabled: self.experts_enabled,
        }
    }

    pub fn toggles(&self) -> LossToggles {
        LossToggles {
            stc: self.stc,
            stm: self.stm,
            vtc: self.vtc,
            vtm: self.vtm,
            mlm: self.mlm,
        }
    }
}
