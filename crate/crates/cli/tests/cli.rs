//! Black-box tests of the binary: argument plumbing, exit codes, and the
//! determinism of the file-producing commands.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_v2d"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run(&[
            "gen-data", "--kind", "stage3-video", "--n", "5", "--seed", "11", "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(
        fs::read(a.join("data.jsonl")).unwrap(),
        fs::read(b.join("data.jsonl")).unwrap()
    );
    let visual_names = |d: &Path| {
        let mut names: Vec<_> = fs::read_dir(d.join("visuals"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        names.sort();
        names
    };
    let names = visual_names(&a);
    assert_eq!(names, visual_names(&b));
    assert_eq!(
        fs::read(a.join("visuals").join(&names[0])).unwrap(),
        fs::read(b.join("visuals").join(&names[0])).unwrap()
    );
}

#[test]
fn report_scores_a_self_match_at_the_ceilings() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.jsonl");
    let refs = dir.path().join("refs.jsonl");
    // four distinct texts so the consensus idf is non-degenerate
    let texts = [
        ("a", "the red square moves right"),
        ("b", "a blue circle grows slowly"),
        ("c", "two green triangles shrink fast"),
        ("d", "the yellow shape fades out"),
    ];
    let mut p = String::new();
    let mut r = String::new();
    for (id, t) in texts {
        p.push_str(&format!("{}\n", serde_json::json!({"id": id, "generated": t})));
        r.push_str(&format!("{}\n", serde_json::json!({"id": id, "references": [t]})));
    }
    fs::write(&pred, p).unwrap();
    fs::write(&refs, r).unwrap();
    let o = run(&[
        "report", "--pred", pred.to_str().unwrap(), "--ref", refs.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("B-1"), "{stdout}");
    // B-1..B-4 and R at their ceiling, the consensus metric at its 10-point scale
    assert!(stdout.matches("1.0000").count() >= 5, "{stdout}");
    assert!(stdout.contains("10.0000"), "{stdout}");
}

#[test]
fn config_errors_exit_2_and_data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{\"model.dims\": 4}").unwrap();
    let o = run(&["train", "--stage", "1", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));

    // well-formed config pointing at a missing data file
    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        format!(
            "{{\"data.stage1\": \"{}\", \"data.out_dir\": \"{}\"}}",
            dir.path().join("nope.jsonl").display(),
            dir.path().join("run").display()
        ),
    )
    .unwrap();
    let o = run(&["train", "--stage", "1", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));

    // stage outside 1..3
    let o = run(&["train", "--stage", "4", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    // embedder choices are validated before any checkpoint io
    let o = run(&["eval", "--ckpt", "x", "--data", "y", "--embedder", "ftp://nope"]);
    assert_eq!(o.status.code(), Some(2));

    // unknown ablation token
    let o = run(&[
        "train", "--stage", "1", "--config", cfg.to_str().unwrap(), "--ablate", "no-such",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_and_eval_round_trip_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let o = run(&[
        "gen-data", "--kind", "stage1", "--n", "6", "--seed", "2", "--out",
        corpus.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let cfg = dir.path().join("cfg.json");
    fs::write(
        &cfg,
        format!(
            "{{\"data.stage1\": \"{}\", \"data.out_dir\": \"{}\", \
             \"train.stage1_max_epochs\": 1, \"train.early_stop_stage1\": false}}",
            corpus.join("data.jsonl").display(),
            dir.path().join("run").display()
        ),
    )
    .unwrap();
    let o = run(&["train", "--stage", "1", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("best checkpoint"), "{stdout}");
    assert!(dir.path().join("run/stage1/best/manifest.json").exists());
}
