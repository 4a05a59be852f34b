//! The three-stage training loop: schedule, ablation switches, per-epoch
//! seeding, validation-driven early stopping, and checkpointing. Training
//! runs in f32 throughout.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::data::{load_jsonl, make_batches, shuffle_indices, Batch, Sample, Schema, Vocabulary};
use crate::error::{config_err, data_err, Result};
use crate::model::{LossToggles, Model, Stage};
use crate::optim::AdamW;
use crate::pipeline::checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointMeta, DirLock, MANIFEST_FILE,
};
use crate::pipeline::config::RunConfig;
use crate::rng::derived;

/// Pipeline element type. Checkpoints store f32, so training in f32 makes
/// the save/load cycle lossless.
pub type El = f32;

/// Linear warmup from zero to `base` over `warmup` steps, then linear
/// decay to `min_lr` at `total`. Steps beyond `total` clamp to `min_lr`.
pub fn lr_at(step: usize, warmup: usize, total: usize, base: f64, min_lr: f64) -> f64 {
    let step = step.min(total);
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base;
    }
    let frac = (step - warmup) as f64 / (total - warmup) as f64;
    base + (min_lr - base) * frac
}

/// Apply `--ablate` tokens to a config copy. Tokens mirror the ablation
/// table rows; unknown tokens are config errors.
pub fn apply_ablations(cfg: &RunConfig, list: &str) -> Result<RunConfig> {
    let mut c = cfg.clone();
    for tok in list.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        match tok {
            "no-stc" => c.stc = false,
            "no-stm" => c.stm = false,
            "no-stc-stm" => {
                c.stc = false;
                c.stm = false;
            }
            "no-vtc" => c.vtc = false,
            "no-vtm" => c.vtm = false,
            "no-vtc-vtm" => {
                c.vtc = false;
                c.vtm = false;
            }
            "no-mlm" => c.mlm = false,
            "no-experts" => c.experts_enabled = false,
            "no-separate-visual" => c.separate_spatial_temporal = false,
            other => {
                return Err(config_err(format!(
                    "unknown ablation {other:?} (expected no-stc, no-stm, no-stc-stm, no-vtc, \
                     no-vtm, no-vtc-vtm, no-mlm, no-experts, no-separate-visual)"
                )))
            }
        }
    }
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub stage: Stage,
    pub stage_dir: PathBuf,
    pub last_dir: PathBuf,
    pub best_dir: PathBuf,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub best_val: f64,
}

/// Where a stage keeps its artifacts under the run directory.
pub fn stage_dir(cfg: &RunConfig, stage: Stage) -> PathBuf {
    cfg.out_dir.join(format!("stage{}", stage.index()))
}

pub(crate) fn stage_schema(stage: Stage) -> Schema {
    match stage {
        Stage::One => Schema::Caption,
        Stage::Two | Stage::Three => Schema::Dialog,
    }
}

fn stage_data_path(cfg: &RunConfig, stage: Stage) -> Result<PathBuf> {
    let (key, p) = match stage {
        Stage::One => ("data.stage1", &cfg.stage1_data),
        Stage::Two => ("data.stage2", &cfg.stage2_data),
        Stage::Three => ("data.stage3", &cfg.stage3_data),
    };
    p.clone()
        .ok_or_else(|| config_err(format!("stage {} needs {key} set", stage.index())))
}

/// The vocabulary configured explicitly, or vocab.txt next to the data.
pub fn resolve_vocab(cfg: &RunConfig, data_path: &Path) -> Result<Vocabulary> {
    let p = cfg.vocab.clone().unwrap_or_else(|| {
        data_path
            .parent()
            .unwrap_or(Path::new("."))
            .join("vocab.txt")
    });
    Vocabulary::load(&p)
}

fn max_epochs(cfg: &RunConfig, stage: Stage) -> usize {
    match stage {
        Stage::One => cfg.stage1_max_epochs,
        Stage::Two => cfg.stage2_max_epochs,
        Stage::Three => cfg.stage3_max_epochs,
    }
}

fn early_stop_enabled(cfg: &RunConfig, stage: Stage) -> bool {
    match stage {
        Stage::One => cfg.early_stop_stage1,
        Stage::Two | Stage::Three => cfg.early_stop_stage23,
    }
}

/// One dataset, or two trained with strictly alternating batches (the
/// joint domain-shift plan).
pub(crate) enum DataPlan {
    Single(PathBuf),
    Alternating(PathBuf, PathBuf),
}

struct LoadedSet {
    samples: Vec<Sample>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

fn split_set(samples: Vec<Sample>, cfg: &RunConfig, stage: Stage, tag: u64) -> Result<LoadedSet> {
    let n = samples.len();
    if n < 4 {
        return Err(data_err(format!(
            "{n} samples cannot be split into train and validation parts"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    // the split is fixed per run, independent of the epoch rngs
    let mut rng = derived(cfg.seed, &[stage.index() as u64, tag, 0xda7a]);
    idx.shuffle(&mut rng);
    let mut n_val = ((n as f64 * cfg.val_frac).ceil() as usize).max(1);
    if stage == Stage::One {
        n_val = n_val.max(2); // stage-1 losses need pairs
    }
    let (val, train) = idx.split_at(n_val);
    if train.len() < 2 {
        return Err(data_err(format!("{n} samples leave no training set after the split")));
    }
    Ok(LoadedSet {
        samples,
        train_idx: train.to_vec(),
        val_idx: val.to_vec(),
    })
}

fn epoch_batches(
    set: &LoadedSet,
    cfg: &RunConfig,
    stage: Stage,
    vocab: &Vocabulary,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<Vec<Batch>> {
    let perm = shuffle_indices(set.train_idx.len(), rng);
    let order: Vec<usize> = perm.into_iter().map(|i| set.train_idx[i]).collect();
    make_batches(
        &set.samples,
        &order,
        vocab,
        cfg.batch,
        cfg.frames,
        stage == Stage::One,
    )
}

fn val_batches(set: &LoadedSet, cfg: &RunConfig, stage: Stage, vocab: &Vocabulary) -> Result<Vec<Batch>> {
    make_batches(
        &set.samples,
        &set.val_idx,
        vocab,
        cfg.batch,
        cfg.frames,
        stage == Stage::One,
    )
}

fn batch_loss(
    model: &Model<El>,
    batch: &Batch,
    stage: Stage,
    toggles: &LossToggles,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<(crate::tensor::Tensor<El>, Vec<(&'static str, f64)>)> {
    match stage {
        Stage::One => {
            let out = model.stage1_losses(batch, toggles, rng)?;
            Ok((out.total, out.parts))
        }
        _ => {
            let (loss, _) = model.answer_loss(batch, stage)?;
            let v = loss.item() as f64;
            Ok((loss, vec![("gen", v)]))
        }
    }
}

pub fn run_stage(
    cfg: &RunConfig,
    stage: Stage,
    resume: Option<&Path>,
    from_scratch: bool,
) -> Result<TrainOutcome> {
    let plan = DataPlan::Single(stage_data_path(cfg, stage)?);
    run_stage_with(cfg, stage, plan, resume, None, from_scratch, None)
}

/// Full-control entry: `init_from` overrides where the prior-stage
/// parameters come from (domain-shift legs chain through it), and
/// `halt_after` kills the run at an epoch boundary the way an external
/// interruption would — no best/ backfill, last/ left behind to resume.
pub(crate) fn run_stage_with(
    cfg: &RunConfig,
    stage: Stage,
    plan: DataPlan,
    resume: Option<&Path>,
    init_from: Option<&Path>,
    from_scratch: bool,
    halt_after: Option<usize>,
) -> Result<TrainOutcome> {
    let schema = stage_schema(stage);
    let (set_a, set_b) = match &plan {
        DataPlan::Single(p) => (
            split_set(load_jsonl(p, schema)?, cfg, stage, 0)?,
            None,
        ),
        DataPlan::Alternating(pa, pb) => (
            split_set(load_jsonl(pa, schema)?, cfg, stage, 0)?,
            Some(split_set(load_jsonl(pb, schema)?, cfg, stage, 1)?),
        ),
    };
    let first_path = match &plan {
        DataPlan::Single(p) | DataPlan::Alternating(p, _) => p.clone(),
    };
    let vocab = resolve_vocab(cfg, &first_path)?;

    let dir = stage_dir(cfg, stage);
    let _lock = DirLock::acquire(&dir)?;
    let last_dir = dir.join("last");
    let best_dir = dir.join("best");

    let model: Model<El> = Model::new(
        &mut derived(cfg.seed, &[0x1217]),
        cfg.model_config(vocab.len()),
    )?;
    let mut opt = AdamW::new(model.stage_params(stage), cfg.weight_decay, Some(cfg.clip))?;

    let mut start_epoch = 0usize;
    let mut global_step = 0usize;
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0usize;

    if let Some(rdir) = resume {
        let loaded = load_checkpoint(rdir)?;
        if loaded.manifest.stage != stage.index() {
            return Err(config_err(format!(
                "checkpoint at {} is for stage {}, not stage {}",
                rdir.display(),
                loaded.manifest.stage,
                stage.index()
            )));
        }
        if loaded.manifest.config_hash != cfg.config_hash() {
            return Err(config_err(format!(
                "checkpoint at {} was written under a different configuration",
                rdir.display()
            )));
        }
        loaded.apply_params(&model.all_params())?;
        loaded.apply_optimizer(&mut opt)?;
        start_epoch = loaded.manifest.next_epoch;
        global_step = loaded.manifest.global_step;
        best_val = loaded.manifest.best_val;
        bad_epochs = loaded.manifest.bad_epochs;
    } else if stage != Stage::One && !from_scratch {
        let prior_stage = Stage::from_index(stage.index() - 1)?;
        let prior = match init_from {
            Some(p) => p.to_path_buf(),
            None => stage_dir(cfg, prior_stage).join("best"),
        };
        if !prior.join(MANIFEST_FILE).exists() {
            return Err(config_err(format!(
                "stage {} needs the stage-{} checkpoint at {} (run it first, or pass --from-scratch)",
                stage.index(),
                prior_stage.index(),
                prior.display()
            )));
        }
        let loaded = load_checkpoint(&prior)?;
        if loaded.manifest.model_hash != cfg.model_hash() {
            return Err(config_err(format!(
                "checkpoint at {} was built with a different architecture",
                prior.display()
            )));
        }
        // parameters only; each stage starts its optimizer fresh
        loaded.apply_params(&model.all_params())?;
    }

    // batch counts per epoch depend only on modality group sizes, never
    // on the shuffle, so the schedule length is exact
    let mut probe_rng = derived(cfg.seed, &[stage.index() as u64, 0, 0x9406]);
    let mut per_epoch = epoch_batches(&set_a, cfg, stage, &vocab, &mut probe_rng)?.len();
    if let Some(b) = &set_b {
        per_epoch += epoch_batches(b, cfg, stage, &vocab, &mut probe_rng)?.len();
    }
    if per_epoch == 0 {
        return Err(data_err("no usable training batches (corpus too small for the batch size)"));
    }
    let cap = max_epochs(cfg, stage);
    let total_steps = per_epoch * cap;
    let warmup = (total_steps as f64 * cfg.warmup_frac).floor() as usize;

    let toggles = cfg.toggles();
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let mut epochs_run = start_epoch;
    let mut stopped_early = false;
    let halt_at = halt_after.map_or(cap, |h| h.min(cap));

    for epoch in start_epoch..halt_at {
        let mut rng_e = derived(cfg.seed, &[stage.index() as u64, epoch as u64]);
        let mut batches = epoch_batches(&set_a, cfg, stage, &vocab, &mut rng_e)?;
        if let Some(b) = &set_b {
            // strict alternation: a, b, a, b, …; the longer tail runs out last
            let other = epoch_batches(b, cfg, stage, &vocab, &mut rng_e)?;
            batches = interleave(batches, other);
        }

        let mut train_sum = 0.0;
        let mut parts_sum: BTreeMap<&'static str, (f64, usize)> = BTreeMap::new();
        let mut last_lr = 0.0;
        for batch in &batches {
            opt.zero_grads();
            let (loss, parts) = batch_loss(&model, batch, stage, &toggles, &mut rng_e)?;
            train_sum += loss.item() as f64;
            for (name, v) in parts {
                let e = parts_sum.entry(name).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
            loss.backward()?;
            last_lr = lr_at(global_step, warmup, total_steps, cfg.base_lr, cfg.min_lr);
            opt.step(last_lr)?;
            global_step += 1;
        }
        let train_loss = train_sum / batches.len() as f64;

        let mut val_rng = derived(cfg.seed, &[stage.index() as u64, epoch as u64, 0x7e57]);
        let mut val_sum = 0.0;
        let mut val_n = 0usize;
        let mut vb = val_batches(&set_a, cfg, stage, &vocab)?;
        if let Some(b) = &set_b {
            vb.extend(val_batches(b, cfg, stage, &vocab)?);
        }
        for batch in &vb {
            let (loss, _) = batch_loss(&model, batch, stage, &toggles, &mut val_rng)?;
            val_sum += loss.item() as f64;
            val_n += 1;
        }
        if val_n == 0 {
            return Err(data_err("validation split produced no batches"));
        }
        let val_loss = val_sum / val_n as f64;

        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
        }
        epochs_run = epoch + 1;

        let parts_json: serde_json::Map<String, serde_json::Value> = parts_sum
            .iter()
            .map(|(k, (s, n))| (k.to_string(), (s / *n as f64).into()))
            .collect();
        let line = serde_json::json!({
            "stage": stage.index(),
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "lr": last_lr,
            "step": global_step,
            "parts": parts_json,
        });
        writeln!(metrics, "{line}")?;

        let meta = CheckpointMeta {
            stage: stage.index(),
            next_epoch: epoch + 1,
            global_step,
            best_val,
            bad_epochs,
        };
        let params = model.all_params();
        save_checkpoint(&last_dir, cfg, &vocab, &params, Some(&opt), meta)?;
        if improved {
            save_checkpoint(&best_dir, cfg, &vocab, &params, Some(&opt), meta)?;
        }
        log::info!(
            "stage {} epoch {epoch}: train {train_loss:.4} val {val_loss:.4}{}",
            stage.index(),
            if improved { " (best)" } else { "" }
        );

        if early_stop_enabled(cfg, stage) && bad_epochs >= cfg.patience {
            stopped_early = true;
            break;
        }
    }

    if halt_at < cap && !stopped_early {
        // simulated interruption: leave last/ behind exactly as a crash would
        return Ok(TrainOutcome {
            stage,
            stage_dir: dir,
            last_dir,
            best_dir,
            epochs_run,
            stopped_early: false,
            best_val,
        });
    }

    if !best_dir.join(MANIFEST_FILE).exists() {
        // resumed directly into a stop condition; keep the contract that
        // best/ exists after a successful run
        let params = model.all_params();
        let meta = CheckpointMeta {
            stage: stage.index(),
            next_epoch: epochs_run,
            global_step,
            best_val,
            bad_epochs,
        };
        save_checkpoint(&best_dir, cfg, &vocab, &params, Some(&opt), meta)?;
    }

    Ok(TrainOutcome {
        stage,
        stage_dir: dir,
        last_dir,
        best_dir,
        epochs_run,
        stopped_early,
        best_val,
    })
}

fn interleave(a: Vec<Batch>, b: Vec<Batch>) -> Vec<Batch> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let mut ia = a.into_iter();
    let mut ib = b.into_iter();
    loop {
        match (ia.next(), ib.next()) {
            (Some(x), Some(y)) => {
                out.push(x);
                out.push(y);
            }
            (Some(x), None) => out.push(x),
            (None, Some(y)) => out.push(y),
            (None, None) => break,
        }
    }
    out
}
