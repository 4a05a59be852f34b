//! End-to-end flow over the synthetic corpora: all three training stages,
//! checkpoint evaluation (deterministic, with and without expert swaps),
//! and domain-shift plans.

use v2d_core::data::synth::{synth_corpus, SynthKind};
use v2d_core::eval::EmbedderChoice;
use v2d_core::experts::StreamId;
use v2d_core::model::Stage;
use v2d_core::pipeline::{
    run_domain_shift, run_eval, run_stage, EvalMode, RunConfig, ShiftPlan,
};

#[test]
fn three_stages_then_eval_then_domain_shift() {
    let dir = tempfile::tempdir().unwrap();
    synth_corpus(101, 8, SynthKind::Stage1, &dir.path().join("s1")).unwrap();
    synth_corpus(102, 8, SynthKind::Stage2, &dir.path().join("s2")).unwrap();
    synth_corpus(103, 8, SynthKind::Stage3Video, &dir.path().join("s3a")).unwrap();
    synth_corpus(104, 8, SynthKind::Stage3Image, &dir.path().join("s3b")).unwrap();

    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.path().join("run");
    cfg.stage1_max_epochs = 2;
    cfg.stage2_max_epochs = 1;
    cfg.stage3_max_epochs = 2;
    cfg.early_stop_stage1 = false;
    cfg.seed = 3;
    cfg.stage1_data = Some(dir.path().join("s1/data.jsonl"));
    cfg.stage2_data = Some(dir.path().join("s2/data.jsonl"));
    cfg.stage3_data = Some(dir.path().join("s3a/data.jsonl"));
    cfg.stage3_data_b = Some(dir.path().join("s3b/data.jsonl"));

    run_stage(&cfg, Stage::One, None, false).unwrap();
    run_stage(&cfg, Stage::Two, None, false).unwrap();
    let out3 = run_stage(&cfg, Stage::Three, None, false).unwrap();
    assert!(out3.best_dir.join("manifest.json").exists());

    // identical checkpoint and dataset -> byte-identical artifacts
    let data = cfg.stage3_data.clone().unwrap();
    let e1 = run_eval(
        &out3.best_dir,
        &data,
        EvalMode::Both,
        &EmbedderChoice::Builtin,
        &[],
        Some(&dir.path().join("eval1")),
    )
    .unwrap();
    let e2 = run_eval(
        &out3.best_dir,
        &data,
        EvalMode::Both,
        &EmbedderChoice::Builtin,
        &[],
        Some(&dir.path().join("eval2")),
    )
    .unwrap();
    assert_eq!(
        std::fs::read(&e1.report_path).unwrap(),
        std::fs::read(&e2.report_path).unwrap()
    );
    assert_eq!(
        std::fs::read(&e1.predictions_path).unwrap(),
        std::fs::read(&e2.predictions_path).unwrap()
    );

    let rep = e1.report;
    assert_eq!(rep.samples, 8);
    let nlg = rep.nlg.expect("both mode scores generation");
    assert!(nlg.bleu.iter().all(|b| (0.0..=1.0).contains(b)));
    assert!((0.0..=1.0).contains(&nlg.rouge_l));
    let ret = rep.retrieval.expect("both mode ranks candidates");
    // the synthetic candidate sets carry graded relevance
    assert!(ret.ndcg.is_some());
    assert!(ret.r_at_10 >= ret.r_at_5 && ret.r_at_5 >= ret.r_at_1);

    // swapping is an inference-time change: it runs, reports, and leaves
    // the checkpoint untouched
    let swapped = run_eval(
        &out3.best_dir,
        &data,
        EvalMode::Nlg,
        &EmbedderChoice::Builtin,
        &[(StreamId::Spa, StreamId::Tmp)],
        Some(&dir.path().join("eval-swap")),
    )
    .unwrap();
    assert_eq!(swapped.report.samples, 8);

    // retrieval mode on candidate-less data is a data error
    let err = run_eval(
        &out3.best_dir,
        &cfg.stage2_data.clone().unwrap(),
        EvalMode::Retrieval,
        &EmbedderChoice::Builtin,
        &[],
        Some(&dir.path().join("eval-err")),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 3);

    // joint plan: one model, alternating batches, evaluated on both sets
    let joint = run_domain_shift(&cfg, ShiftPlan::Joint, false).unwrap();
    assert_eq!(joint.report.legs.len(), 1);
    assert_eq!(joint.report.eval.len(), 2);
    assert!(joint.report_path.exists());
    assert!(joint.report.eval.iter().all(|e| e.gen_loss.is_finite()));

    // sequential plan: two legs, the second chained off the first
    let seq = run_domain_shift(&cfg, ShiftPlan::AToB, false).unwrap();
    assert_eq!(seq.report.legs.len(), 2);
    assert_eq!(seq.report.eval.len(), 2);
    let leg2 = std::path::PathBuf::from(&seq.report.legs[1].checkpoint);
    assert!(leg2.join("manifest.json").exists());
}
