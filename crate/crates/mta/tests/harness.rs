use std::fs;
use std::path::Path;
use std::process::Command;

use mta::checkpoint::{Checkpoint, MANIFEST};
use mta::config::RunConfig;
use mta::harness::{
    ablate, checkpoint_dir, evaluate, report_from_dumps, run_dir, train, Method, RunRecord, Split, Sweeps,
};
use mta::plot::plot;
use mta::report::report_text;
use mta_core::scenegen::CLASS_NAMES;

fn tiny(root: &Path, name: &str) -> RunConfig {
    let mut c = RunConfig::default();
    for (k, v) in [
        ("scenes", "10"),
        ("min_objects", "1"),
        ("max_objects", "3"),
        ("queries", "4"),
        ("d_model", "8"),
        ("decoder_layers", "1"),
        ("heads", "2"),
        ("ffn_dim", "16"),
        ("qformer_blocks", "2"),
        ("bla_layer", "1"),
        ("lm_dim", "8"),
        ("lm_layers", "1"),
        ("lm_heads", "2"),
        ("lm_ffn", "16"),
        ("caption_queries", "2"),
        ("prompts", "4"),
        ("prompt_dim", "8"),
        ("epochs", "3"),
        ("lr", "1e-3"),
    ] {
        c.set(k, v).unwrap();
    }
    c.name = name.into();
    c.output = root.to_string_lossy().into_owned();
    c
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn training_is_deterministic_and_logs_consistent_losses() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train(&tiny(tmp.path(), "a"), None).unwrap();
    let b = train(&tiny(&tmp.path().join("again"), "a"), None).unwrap();
    assert_eq!(a.checkpoint_hash, b.checkpoint_hash);
    assert_eq!(a.report, b.report);
    assert_eq!(a.epochs, b.epochs);
    let (ra, rb) = (run_dir(&tiny(tmp.path(), "a")), run_dir(&tiny(&tmp.path().join("again"), "a")));
    for f in ["losses.csv", "steps.csv", "report.txt", "predictions.jsonl", "captions.jsonl"] {
        assert_eq!(read(ra.join(f)), read(rb.join(f)), "{f}");
    }
    assert_eq!(a.epochs.len(), 3);

    let cfg = tiny(tmp.path(), "a");
    let steps = read(ra.join("steps.csv"));
    let mut rows = 0;
    for line in steps.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap_or(0.0)).collect();
        let (det, lm, bla, dca, total) = (f[2], f[3], f[4], f[5], f[6]);
        let w = cfg.loss_weights();
        let again = w.alpha * det + w.beta * lm + w.lambda_bla * bla + w.lambda_dca * dca;
        assert!((again - total).abs() <= 1e-10 * total.abs().max(1.0), "{line}");
        rows += 1;
    }
    assert_eq!(rows, 3 * 2);
}

#[test]
fn checkpoints_round_trip_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "ck");
    cfg.epochs = 1;
    train(&cfg, None).unwrap();
    let dir = checkpoint_dir(&run_dir(&cfg), 1);
    let ck = Checkpoint::load(&dir).unwrap();
    let copy = tmp.path().join("copy");
    let hash = ck.save(&copy).unwrap();
    assert_eq!(hash, Checkpoint::hash_of(&dir).unwrap());
    assert_eq!(Checkpoint::load(&copy).unwrap(), ck);
    assert_eq!(read(copy.join(MANIFEST)), read(dir.join(MANIFEST)));
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "r");
    let full = train(&cfg, None).unwrap();
    let run = run_dir(&cfg);
    let hashes: Vec<String> = (1..=3).map(|e| Checkpoint::hash_of(&checkpoint_dir(&run, e)).unwrap()).collect();
    let losses = read(run.join("losses.csv"));
    let steps = read(run.join("steps.csv"));
    for e in [1, 2] {
        let resumed = train(&cfg, Some(e)).unwrap();
        assert_eq!(resumed.checkpoint_hash, full.checkpoint_hash, "resume at {e}");
        assert_eq!(resumed.report, full.report);
        assert_eq!(resumed.initial_loss, full.initial_loss);
        for (i, h) in hashes.iter().enumerate() {
            assert_eq!(&Checkpoint::hash_of(&checkpoint_dir(&run, i as u64 + 1)).unwrap(), h);
        }
        assert_eq!(read(run.join("losses.csv")), losses);
        assert_eq!(read(run.join("steps.csv")), steps);
    }

    let mut other = cfg.clone();
    other.lr = 5e-4;
    let err = train(&other, Some(1)).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn evaluation_paths_agree() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny(tmp.path(), "ev");
    let record = train(&cfg, None).unwrap();
    let run = run_dir(&cfg);
    let (report, out) = evaluate(&run, Split::Val).unwrap();
    assert_eq!(report.entries(&CLASS_NAMES), record.report);
    assert_eq!(read(out.join("report.txt")), read(run.join("report.txt")));
    let from_dumps = report_from_dumps(&out, &cfg, Split::Val).unwrap();
    assert_eq!(report_text(&from_dumps), report_text(&report));

    let first = read(out.join("report.txt"));
    let (again, out2) = evaluate(&checkpoint_dir(&run, 3), Split::Val).unwrap();
    assert_eq!(out2, out);
    assert_eq!(report_text(&again), first);
    assert_eq!(read(out.join("report.txt")), first);

    let (early, early_out) = evaluate(&checkpoint_dir(&run, 1), Split::Train).unwrap();
    assert!(early_out.ends_with("eval-train-epoch-001"));
    assert!(early.is_finite());
}

#[test]
fn bad_inputs_map_to_their_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path(), "empty");
    cfg.scenes = 3;
    cfg.train_fraction = 0.99;
    assert_eq!(train(&cfg, None).unwrap_err().exit_code(), 3);

    let mut cfg = tiny(tmp.path(), "crowded");
    cfg.max_objects = 5;
    assert_eq!(train(&cfg, None).unwrap_err().exit_code(), 3);

    let mut cfg = tiny(tmp.path(), "bad");
    cfg.lambda_dca = -1.0;
    assert_eq!(train(&cfg, None).unwrap_err().exit_code(), 2);
    assert_eq!(evaluate(&tmp.path().join("missing"), Split::Val).unwrap_err().exit_code(), 3);

    let bin = env!("CARGO_BIN_EXE_mta");
    let status = Command::new(bin)
        .args(["train", "--lr", "-1", "--output"])
        .arg(tmp.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    let status = Command::new(bin).args(["eval"]).arg(tmp.path().join("missing")).status().unwrap();
    assert_eq!(status.code(), Some(3));
}

#[test]
fn ablation_rows_match_standalone_runs_and_plots_are_stable() {
    let tmp = tempfile::tempdir().unwrap();
    let mut base = tiny(tmp.path(), "abl");
    base.epochs = 1;
    let result = ablate(&base, &[0], Sweeps::default()).unwrap();
    let rows = result.table("ablation").unwrap();
    let labels: Vec<&str> = rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["baseline", "+BLA", "+DCA", "+MTA"]);
    let csv = read(tmp.path().join("abl").join("ablation.csv"));
    assert_eq!(csv.lines().count(), 5);

    let mut alone = Method::Baseline.configure(&base);
    alone.name = "alone".into();
    alone.output = tmp.path().join("elsewhere").to_string_lossy().into_owned();
    let standalone = train(&alone, None).unwrap();
    assert_eq!(rows[0].runs[0].checkpoint_hash, standalone.checkpoint_hash);
    assert_eq!(rows[0].runs[0].report, standalone.report);

    let again = ablate(&base, &[0], Sweeps::default()).unwrap();
    assert_eq!(again, result);

    let runs: Vec<(String, RunRecord)> = rows.iter().map(|r| (r.label.clone(), r.runs[0].clone())).collect();
    let (p, q) = (tmp.path().join("plots-a"), tmp.path().join("plots-b"));
    let written = plot(&runs, &p).unwrap();
    plot(&runs, &q).unwrap();
    assert_eq!(written.len(), 8);
    for f in &written {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(q.join(name)).unwrap());
    }
    assert!(plot(&[], &p).is_err());
}
