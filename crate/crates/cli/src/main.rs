//! The `v2d` binary: training, evaluation, domain-shift experiments,
//! synthetic-corpus generation, and offline report scoring. All real work
//! lives in the library; this file parses arguments and prints results.
//!
//! Exit codes: 0 ok, 2 config error, 3 data error, 4 provider error.
//! Set V2D_LOG (error|warn|info|debug|trace) to control logging.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use v2d_core::data::synth::{synth_corpus, verify_corpus, SynthKind};
use v2d_core::eval::{nlg_report_from_files, EmbedderChoice};
use v2d_core::model::Stage;
use v2d_core::pipeline::{
    apply_ablations, parse_swaps, run_domain_shift, run_eval, run_stage, EvalMode, RunConfig,
    ShiftPlan,
};
use v2d_core::Result;

#[derive(Parser)]
#[command(name = "v2d", version, about = "Expert-routed video dialog at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one stage of the three-stage pipeline
    Train {
        /// Stage to run: 1, 2 or 3
        #[arg(long)]
        stage: u8,
        /// JSON run configuration (flat dotted keys)
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint directory to continue an interrupted run from
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train without the prior stage's checkpoint
        #[arg(long)]
        from_scratch: bool,
        /// Comma-separated switches, e.g. no-stc-stm or no-experts
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Generate answers from a checkpoint and score them
    Eval {
        /// Checkpoint directory (manifest + blob + vocabulary)
        #[arg(long)]
        ckpt: PathBuf,
        /// Dialog dataset (JSONL)
        #[arg(long)]
        data: PathBuf,
        /// nlg, retrieval or both
        #[arg(long, default_value = "both")]
        mode: String,
        /// "builtin" or the base URL of an embedding service
        #[arg(long, default_value = "builtin")]
        embedder: String,
        /// Misroute streams at inference, e.g. spa:tmp,cap:ctx
        #[arg(long)]
        swap: Option<String>,
        /// Where to write report.json and predictions.jsonl
        /// (default: eval/ inside the checkpoint directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune stage 3 across two datasets and evaluate on both
    DomainShift {
        /// a-to-b, b-to-a (sequential) or joint (alternating batches)
        #[arg(long)]
        plan: String,
        #[arg(long)]
        config: PathBuf,
        /// Skip the stage-2 checkpoint requirement for the first leg
        #[arg(long)]
        from_scratch: bool,
    },
    /// Write a synthetic corpus (data.jsonl, visuals/, vocab.txt)
    GenData {
        /// stage1, stage2, stage3-video or stage3-image
        #[arg(long)]
        kind: String,
        /// Number of samples
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a predictions file against a references file
    Report {
        /// JSONL of {"id", "generated"}
        #[arg(long)]
        pred: PathBuf,
        /// JSONL of {"id", "references": [...]}
        #[arg(long = "ref")]
        reference: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("V2D_LOG", "warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train {
            stage,
            config,
            resume,
            from_scratch,
            ablate,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(list) = &ablate {
                cfg = apply_ablations(&cfg, list)?;
            }
            let stage = Stage::from_index(stage)?;
            let out = run_stage(&cfg, stage, resume.as_deref(), from_scratch)?;
            println!(
                "stage {} finished after {} epoch(s){}; best val loss {:.6}",
                out.stage.index(),
                out.epochs_run,
                if out.stopped_early { " (early stop)" } else { "" },
                out.best_val,
            );
            println!("best checkpoint: {}", out.best_dir.display());
        }
        Cmd::Eval {
            ckpt,
            data,
            mode,
            embedder,
            swap,
            out,
        } => {
            let mode = EvalMode::parse(&mode)?;
            let embedder = EmbedderChoice::parse(&embedder)?;
            let swaps = parse_swaps(swap.as_deref().unwrap_or(""))?;
            let outcome = run_eval(&ckpt, &data, mode, &embedder, &swaps, out.as_deref())?;
            if let Some(nlg) = &outcome.report.nlg {
                print!("{}", nlg.table());
            }
            if let Some(r) = &outcome.report.retrieval {
                println!("R@1     {:.4}", r.r_at_1);
                println!("R@5     {:.4}", r.r_at_5);
                println!("R@10    {:.4}", r.r_at_10);
                println!("MRR     {:.4}", r.mrr);
                if let Some(n) = r.ndcg {
                    println!("NDCG    {n:.4}");
                }
            }
            println!("report: {}", outcome.report_path.display());
        }
        Cmd::DomainShift {
            plan,
            config,
            from_scratch,
        } => {
            let plan = ShiftPlan::parse(&plan)?;
            let cfg = RunConfig::load(&config)?;
            let outcome = run_domain_shift(&cfg, plan, from_scratch)?;
            for e in &outcome.report.eval {
                println!(
                    "{}: gen loss {:.4}, teacher-forced acc {:.4}",
                    e.data, e.gen_loss, e.teacher_acc
                );
            }
            println!("report: {}", outcome.report_path.display());
        }
        Cmd::GenData { kind, n, seed, out } => {
            let kind = SynthKind::parse(&kind)?;
            synth_corpus(seed, n, kind, &out)?;
            verify_corpus(&out, kind)?;
            println!("wrote {n} samples under {}", out.display());
        }
        Cmd::Report { pred, reference } => {
            let report = nlg_report_from_files(&pred, &reference)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}
