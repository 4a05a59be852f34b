//! Checkpoint persistence: a JSON manifest describing every tensor plus a
//! little-endian f32 blob holding parameters and, for resumable
//! checkpoints, optimizer moments. Loading restores forward outputs
//! bit-identically — training runs in f32, so no precision is lost.

use std::collections::BTreeMap;
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::Vocabulary;
use crate::error::{config_err, data_err, Result};
use crate::nn::NamedParams;
use crate::optim::{AdamState, AdamW};
use crate::pipeline::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the blob, in f32 units.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentEntry {
    pub name: String,
    pub offset_m: usize,
    pub offset_v: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptSection {
    pub step: u64,
    pub moments: Vec<MomentEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub stage: u8,
    /// Next epoch a resumed run would execute.
    pub next_epoch: usize,
    /// Optimizer steps taken so far across the stage.
    pub global_step: usize,
    pub best_val: f64,
    /// Consecutive evaluations without improvement (early-stop state).
    #[serde(default)]
    pub bad_epochs: usize,
    pub config: BTreeMap<String, Value>,
    pub config_hash: String,
    pub model_hash: String,
    pub params: Vec<ParamEntry>,
    pub opt: Option<OptSection>,
    /// Total f32 count of the blob.
    pub blob_len: usize,
    pub blob_sha256: String,
}

#[derive(Debug, Clone, Copy)]
pub struct CheckpointMeta {
    pub stage: u8,
    pub next_epoch: usize,
    pub global_step: usize,
    pub best_val: f64,
    pub bad_epochs: usize,
}

fn blob_hash(blob: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(blob);
    format!("{:x}", h.finalize())
}

/// Write a checkpoint directory: manifest, parameter blob, and the
/// vocabulary, making the directory self-contained for later evaluation.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &RunConfig,
    vocab: &Vocabulary,
    params: &NamedParams<f32>,
    opt: Option<&AdamW<f32>>,
    meta: CheckpointMeta,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob: Vec<f32> = Vec::new();
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blob.len(),
        });
        blob.extend(t.data().iter());
    }
    let opt_section = opt.map(|o| {
        let state = o.state();
        let moments = state
            .moments
            .iter()
            .map(|(name, m, v)| {
                let offset_m = blob.len();
                blob.extend_from_slice(m);
                let offset_v = blob.len();
                blob.extend_from_slice(v);
                MomentEntry {
                    name: name.clone(),
                    offset_m,
                    offset_v,
                    len: m.len(),
                }
            })
            .collect();
        OptSection {
            step: state.step,
            moments,
        }
    });
    let bytes: Vec<u8> = blob.iter().flat_map(|v| v.to_le_bytes()).collect();
    let manifest = Manifest {
        version: 1,
        stage: meta.stage,
        next_epoch: meta.next_epoch,
        global_step: meta.global_step,
        // JSON has no infinities; an untouched best collapses to MAX,
        // which any finite validation loss still improves on
        best_val: if meta.best_val.is_finite() { meta.best_val } else { f64::MAX },
        bad_epochs: meta.bad_epochs,
        config: cfg.flat_map(),
        config_hash: cfg.config_hash(),
        model_hash: cfg.model_hash(),
        params: entries,
        opt: opt_section,
        blob_len: blob.len(),
        blob_sha256: blob_hash(&bytes),
    };
    // blob first: a manifest without its blob is an obvious half-write
    fs::write(dir.join(BLOB_FILE), &bytes)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub dir: PathBuf,
    pub manifest: Manifest,
    blob: Vec<f32>,
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(config_err(format!(
            "{} is not a checkpoint directory (no {MANIFEST_FILE})",
            dir.display()
        )));
    }
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let bytes = fs::read(dir.join(BLOB_FILE))?;
    if bytes.len() != manifest.blob_len * 4 {
        return Err(data_err(format!(
            "{}: blob holds {} bytes, manifest expects {}",
            dir.display(),
            bytes.len(),
            manifest.blob_len * 4
        )));
    }
    if blob_hash(&bytes) != manifest.blob_sha256 {
        return Err(data_err(format!(
            "{}: blob hash mismatch — corrupt or tampered checkpoint",
            dir.display()
        )));
    }
    let blob: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(LoadedCheckpoint {
        dir: dir.to_path_buf(),
        manifest,
        blob,
    })
}

impl LoadedCheckpoint {
    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_value(&Value::Object(
            self.manifest.config.clone().into_iter().collect(),
        ))
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::load(&self.dir.join(VOCAB_FILE))
    }

    fn slice(&self, offset: usize, len: usize) -> Result<&[f32]> {
        self.blob.get(offset..offset + len).ok_or_else(|| {
            data_err(format!(
                "{}: manifest offset {offset}+{len} outside the blob",
                self.dir.display()
            ))
        })
    }

    /// Copy stored values into the model's parameters. The name sets must
    /// match exactly — a mismatch means the architecture diverged from
    /// the manifest.
    pub fn apply_params(&self, params: &NamedParams<f32>) -> Result<()> {
        let by_name: HashMap<&str, &ParamEntry> = self
            .manifest
            .params
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        if by_name.len() != params.len() {
            return Err(config_err(format!(
                "checkpoint stores {} tensors, model has {}",
                by_name.len(),
                params.len()
            )));
        }
        for (name, t) in params {
            let e = by_name.get(name.as_str()).ok_or_else(|| {
                config_err(format!("checkpoint has no tensor named {name:?}"))
            })?;
            if e.shape != t.shape() {
                return Err(config_err(format!(
                    "tensor {name:?} is {:?} in the checkpoint but {:?} in the model",
                    e.shape,
                    t.shape()
                )));
            }
            t.set_data(self.slice(e.offset, t.numel())?)?;
        }
        Ok(())
    }

    /// Restore optimizer moments and step count, aligned by name to the
    /// optimizer's registry.
    pub fn apply_optimizer(&self, opt: &mut AdamW<f32>) -> Result<()> {
        let section = self
            .manifest
            .opt
            .as_ref()
            .ok_or_else(|| config_err("checkpoint carries no optimizer state"))?;
        let by_name: HashMap<&str, &MomentEntry> = section
            .moments
            .iter()
            .map(|e| (e.name.as_str(), e))
            .collect();
        let mut moments = Vec::with_capacity(opt.params().len());
        for p in opt.params() {
            let e = by_name.get(p.name.as_str()).ok_or_else(|| {
                config_err(format!("checkpoint has no optimizer moments for {:?}", p.name))
            })?;
            moments.push((
                p.name.clone(),
                self.slice(e.offset_m, e.len)?.to_vec(),
                self.slice(e.offset_v, e.len)?.to_vec(),
            ));
        }
        opt.load_state(AdamState {
            step: section.step,
            moments,
        })
    }
}

/// Exclusive ownership of a checkpoint directory. The lock file survives
/// a crash; a stale one must be removed by hand, which is the safe
/// default for training state.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<DirLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(config_err(format!(
                "{} is locked by another process (remove {} if that run is dead)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
