//! Orchestration: run configuration, checkpoint store, the three-stage
//! trainer, and the two experiment harnesses built on top — domain-shift
//! plans over two dialog datasets, and checkpoint evaluation with
//! optional expert swapping at inference time.

pub mod checkpoint;
pub mod config;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, DirLock, LoadedCheckpoint};
pub use config::RunConfig;
pub use trainer::{apply_ablations, lr_at, run_stage, stage_dir, El, TrainOutcome};

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::data::{load_jsonl, make_batches, split_text, Schema, Vocabulary};
use crate::error::{config_err, data_err, Result};
use crate::eval::{
    rank_candidates, score_nlg, summarize_retrieval, BuiltinEmbedder, EmbedderChoice,
    EmbeddingProvider, NlgReport, RemoteEmbedder, RetrievalReport,
};
use crate::experts::StreamId;
use crate::model::{Model, Stage};
use crate::rng::derived;
use trainer::{run_stage_with, DataPlan};

/// How the two stage-3 datasets combine: sequential fine-tuning in either
/// direction, or joint training with strictly alternating batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShiftPlan {
    AToB,
    BToA,
    Joint,
}

impl ShiftPlan {
    pub fn parse(s: &str) -> Result<ShiftPlan> {
        match s {
            "a-to-b" => Ok(ShiftPlan::AToB),
            "b-to-a" => Ok(ShiftPlan::BToA),
            "joint" => Ok(ShiftPlan::Joint),
            other => Err(config_err(format!(
                "unknown plan {other:?} (expected a-to-b|b-to-a|joint)"
            ))),
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ShiftPlan::AToB => "a-to-b",
            ShiftPlan::BToA => "b-to-a",
            ShiftPlan::Joint => "joint",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LegReport {
    pub data: String,
    pub checkpoint: String,
    pub epochs: usize,
    pub stopped_early: bool,
    pub best_val: f64,
}

/// Answer-generation quality of the final model on one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct DatasetEval {
    pub data: String,
    pub gen_loss: f64,
    pub teacher_acc: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ShiftReport {
    pub plan: String,
    pub legs: Vec<LegReport>,
    pub eval: Vec<DatasetEval>,
}

#[derive(Debug, Clone)]
pub struct ShiftOutcome {
    pub report_path: PathBuf,
    pub report: ShiftReport,
}

fn leg_report(data: &Path, out: &TrainOutcome) -> LegReport {
    LegReport {
        data: data.display().to_string(),
        checkpoint: out.best_dir.display().to_string(),
        epochs: out.epochs_run,
        stopped_early: out.stopped_early,
        best_val: out.best_val,
    }
}

/// Stage-3 fine-tuning across two dialog datasets. Sequential plans chain
/// two legs (the second initializes from the first's best checkpoint);
/// the joint plan trains one model on both with alternating batches.
/// Whatever the plan, the final model is evaluated on both datasets.
pub fn run_domain_shift(cfg: &RunConfig, plan: ShiftPlan, from_scratch: bool) -> Result<ShiftOutcome> {
    let a = cfg
        .stage3_data
        .clone()
        .ok_or_else(|| config_err("domain shift needs two datasets; data.stage3 is not set"))?;
    let b = cfg
        .stage3_data_b
        .clone()
        .ok_or_else(|| config_err("domain shift needs two datasets; data.stage3_b is not set"))?;
    let root = cfg.out_dir.join("domain-shift").join(plan.key());
    let stage2_best = stage_dir(cfg, Stage::Two).join("best");

    let mut legs = Vec::new();
    let final_best = match plan {
        ShiftPlan::Joint => {
            let mut c = cfg.clone();
            c.out_dir = root.clone();
            let out = run_stage_with(
                &c,
                Stage::Three,
                DataPlan::Alternating(a.clone(), b.clone()),
                None,
                Some(&stage2_best),
                from_scratch,
                None,
            )?;
            legs.push(LegReport {
                data: format!("{} & {}", a.display(), b.display()),
                checkpoint: out.best_dir.display().to_string(),
                epochs: out.epochs_run,
                stopped_early: out.stopped_early,
                best_val: out.best_val,
            });
            out.best_dir
        }
        ShiftPlan::AToB | ShiftPlan::BToA => {
            let (first, second) = match plan {
                ShiftPlan::AToB => (a.clone(), b.clone()),
                _ => (b.clone(), a.clone()),
            };
            let mut c1 = cfg.clone();
            c1.out_dir = root.join("leg1");
            c1.stage3_data = Some(first.clone());
            c1.stage3_data_b = None;
            let out1 = run_stage_with(
                &c1,
                Stage::Three,
                DataPlan::Single(first.clone()),
                None,
                Some(&stage2_best),
                from_scratch,
                None,
            )?;
            legs.push(leg_report(&first, &out1));

            let mut c2 = cfg.clone();
            c2.out_dir = root.join("leg2");
            c2.stage3_data = Some(second.clone());
            c2.stage3_data_b = None;
            let out2 = run_stage_with(
                &c2,
                Stage::Three,
                DataPlan::Single(second.clone()),
                None,
                Some(&out1.best_dir),
                false,
                None,
            )?;
            legs.push(leg_report(&second, &out2));
            out2.best_dir
        }
    };

    // rebuild the final model from its checkpoint; checkpoints are
    // self-contained, so this also proves the artifact loads cold
    let loaded = load_checkpoint(&final_best)?;
    let ck_cfg = loaded.run_config()?;
    let vocab = loaded.vocabulary()?;
    let model: Model<El> = Model::new(
        &mut derived(ck_cfg.seed, &[0x1217]),
        ck_cfg.model_config(vocab.len()),
    )?;
    loaded.apply_params(&model.all_params())?;

    let mut eval = Vec::new();
    for p in [&a, &b] {
        let (gen_loss, teacher_acc) = dataset_answer_metrics(&model, p, &vocab, &ck_cfg)?;
        eval.push(DatasetEval {
            data: p.display().to_string(),
            gen_loss,
            teacher_acc,
        });
    }

    let report = ShiftReport {
        plan: plan.key().to_string(),
        legs,
        eval,
    };
    fs::create_dir_all(&root)?;
    let report_path = root.join("report.json");
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    fs::write(&report_path, body)?;
    Ok(ShiftOutcome { report_path, report })
}

fn dataset_answer_metrics(
    model: &Model<El>,
    data: &Path,
    vocab: &Vocabulary,
    cfg: &RunConfig,
) -> Result<(f64, f64)> {
    let samples = load_jsonl(data, Schema::Dialog)?;
    if samples.is_empty() {
        return Err(data_err(format!("{} holds no samples", data.display())));
    }
    let order: Vec<usize> = (0..samples.len()).collect();
    let batches = make_batches(&samples, &order, vocab, cfg.batch, cfg.frames, false)?;
    let (mut loss_sum, mut acc_sum, mut n) = (0.0, 0.0, 0usize);
    for b in &batches {
        let (loss, _) = model.answer_loss(b, Stage::Three)?;
        loss_sum += loss.item() as f64 * b.len() as f64;
        acc_sum += model.teacher_accuracy(b, Stage::Three)? * b.len() as f64;
        n += b.len();
    }
    Ok((loss_sum / n as f64, acc_sum / n as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Nlg,
    Retrieval,
    Both,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<EvalMode> {
        match s {
            "nlg" => Ok(EvalMode::Nlg),
            "retrieval" => Ok(EvalMode::Retrieval),
            "both" => Ok(EvalMode::Both),
            other => Err(config_err(format!(
                "unknown eval mode {other:?} (expected nlg|retrieval|both)"
            ))),
        }
    }

    fn wants_nlg(self) -> bool {
        matches!(self, EvalMode::Nlg | EvalMode::Both)
    }

    fn wants_retrieval(self) -> bool {
        matches!(self, EvalMode::Retrieval | EvalMode::Both)
    }
}

/// `spa:tmp,cap:ctx` → stream pairs for inference-time misrouting.
pub fn parse_swaps(s: &str) -> Result<Vec<(StreamId, StreamId)>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (l, r) = part
            .split_once(':')
            .ok_or_else(|| config_err(format!("swap {part:?} is not of the form stream:stream")))?;
        out.push((StreamId::parse(l.trim())?, StreamId::parse(r.trim())?));
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nlg: Option<NlgReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalReport>,
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub out_dir: PathBuf,
    pub predictions_path: PathBuf,
    pub report_path: PathBuf,
    pub report: EvalReport,
}

struct EvalRow {
    id: String,
    generated: String,
    answer: String,
    candidates: Option<Vec<String>>,
    gt_index: Option<usize>,
    relevance: Option<Vec<f64>>,
}

/// Greedy generation over a dialog dataset from a checkpoint, scored as
/// requested. Swaps reroute streams to the wrong experts before decoding.
/// Writes predictions.jsonl and report.json under `out_dir` (default:
/// eval/ inside the checkpoint directory); both files are deterministic
/// for a fixed checkpoint and dataset.
pub fn run_eval(
    ckpt: &Path,
    data: &Path,
    mode: EvalMode,
    embedder: &EmbedderChoice,
    swaps: &[(StreamId, StreamId)],
    out_dir: Option<&Path>,
) -> Result<EvalOutcome> {
    let loaded = load_checkpoint(ckpt)?;
    let cfg = loaded.run_config()?;
    let vocab = loaded.vocabulary()?;
    let mut model: Model<El> = Model::new(
        &mut derived(cfg.seed, &[0x1217]),
        cfg.model_config(vocab.len()),
    )?;
    loaded.apply_params(&model.all_params())?;
    if !swaps.is_empty() {
        let map = model.stack.routing().swapped(swaps)?;
        model.stack.set_routing(map)?;
    }

    let samples = load_jsonl(data, Schema::Dialog)?;
    if samples.is_empty() {
        return Err(data_err(format!("{} holds no samples", data.display())));
    }
    let order: Vec<usize> = (0..samples.len()).collect();
    let batches = make_batches(&samples, &order, &vocab, cfg.batch, cfg.frames, false)?;

    let mut rows = Vec::with_capacity(samples.len());
    for batch in &batches {
        for i in 0..batch.len() {
            let ids = model.generate(batch, i, Stage::Three)?;
            let item = &batch.items[i];
            rows.push(EvalRow {
                id: item.id.clone(),
                generated: vocab.detokenize(&ids),
                answer: item.answer_text.clone(),
                candidates: item.candidates.clone(),
                gt_index: item.gt_index,
                relevance: item.relevance.clone(),
            });
        }
    }

    let nlg = if mode.wants_nlg() {
        let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = rows
            .iter()
            .map(|r| (split_text(&r.generated), vec![split_text(&r.answer)]))
            .collect();
        Some(score_nlg(&pairs)?)
    } else {
        None
    };

    let retrieval = if mode.wants_retrieval() {
        let provider: Box<dyn EmbeddingProvider + '_> = match embedder {
            EmbedderChoice::Builtin => Box::new(BuiltinEmbedder::new(&model.lm, &vocab)),
            EmbedderChoice::Remote(url) => Box::new(RemoteEmbedder::new(url)),
        };
        let mut ranked = Vec::with_capacity(rows.len());
        for r in &rows {
            let cands = r.candidates.as_ref().ok_or_else(|| {
                data_err(format!(
                    "sample {} has no candidates; retrieval mode needs them",
                    r.id
                ))
            })?;
            let gt = r
                .gt_index
                .ok_or_else(|| data_err(format!("sample {} has no gt_index", r.id)))?;
            ranked.push(rank_candidates(
                &r.generated,
                cands,
                gt,
                r.relevance.clone(),
                provider.as_ref(),
            )?);
        }
        // graded gains are only meaningful when every sample carries them
        let want_ndcg = ranked.iter().all(|r| r.relevance.is_some());
        Some(summarize_retrieval(&ranked, want_ndcg)?)
    } else {
        None
    };

    let out = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.join("eval"));
    fs::create_dir_all(&out)?;

    let mut pred_text = String::new();
    for r in &rows {
        let line = serde_json::json!({"id": r.id, "generated": r.generated});
        pred_text.push_str(&line.to_string());
        pred_text.push('\n');
    }
    let predictions_path = out.join("predictions.jsonl");
    fs::write(&predictions_path, pred_text)?;

    let report = EvalReport {
        samples: rows.len(),
        nlg,
        retrieval,
    };
    let report_path = out.join("report.json");
    let mut body = serde_json::to_string_pretty(&report)?;
    body.push('\n');
    fs::write(&report_path, body)?;

    Ok(EvalOutcome {
        out_dir: out,
        predictions_path,
        report_path,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_and_mode_tokens_parse() {
        assert_eq!(ShiftPlan::parse("a-to-b").unwrap(), ShiftPlan::AToB);
        assert_eq!(ShiftPlan::parse("b-to-a").unwrap(), ShiftPlan::BToA);
        assert_eq!(ShiftPlan::parse("joint").unwrap(), ShiftPlan::Joint);
        assert!(ShiftPlan::parse("a->b").is_err());
        assert_eq!(EvalMode::parse("nlg").unwrap(), EvalMode::Nlg);
        assert_eq!(EvalMode::parse("retrieval").unwrap(), EvalMode::Retrieval);
        assert_eq!(EvalMode::parse("both").unwrap(), EvalMode::Both);
        assert!(EvalMode::parse("all").is_err());
    }

    #[test]
    fn swap_lists_parse_or_reject() {
        let swaps = parse_swaps("spa:tmp,cap:ctx").unwrap();
        assert_eq!(swaps, vec![(StreamId::Spa, StreamId::Tmp), (StreamId::Cap, StreamId::Ctx)]);
        assert_eq!(parse_swaps("").unwrap(), vec![]);
        assert!(parse_swaps("spa-tmp").is_err());
        assert!(parse_swaps("spa:vis").is_err());
    }

    #[test]
    fn domain_shift_without_a_second_dataset_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.stage3_data = Some("a.jsonl".into());
        let err = run_domain_shift(&cfg, ShiftPlan::Joint, true).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("data.stage3_b"));
    }
}
