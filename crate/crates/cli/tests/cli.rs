use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use xsum::dataset::{compute_stats, load_corpus, write_corpus, FeatureStore, FrameData, LoadOptions, Split};
use xsum::synth::{generate, SynthConfig};
use xsum::train::CheckpointHeader;

fn xsum(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xsum"))
        .args(args)
        .current_dir(dir)
        .env("XSUM_CACHE", "features")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let last = text.lines().rev().find(|l| !l.trim().is_empty()).expect("stderr has a line");
    serde_json::from_str(last).unwrap_or_else(|e| panic!("not JSON ({e}): {last}"))
}

/// Synthetic corpus with a feature store in `dir`: train, val and test
/// records in proportion 6:2:2.
fn toy_corpus(dir: &Path, videos: usize) {
    let cfg = SynthConfig {
        videos,
        min_frames: 12,
        max_frames: 24,
        seed: 5,
        ..Default::default()
    };
    let mut corpus = generate(&cfg);
    let feats: Vec<(&str, &ndarray::Array2<f64>)> = corpus
        .samples
        .iter()
        .map(|s| match &s.video.frames {
            FrameData::Features(f) => (s.video.video_id.as_str(), f),
            _ => unreachable!(),
        })
        .collect();
    FeatureStore::write(&dir.join("features"), cfg.d_vis, feats).unwrap();
    for (i, s) in corpus.samples.iter_mut().enumerate() {
        s.video.split = match i % 5 {
            0..=2 => Split::Train,
            3 => Split::Val,
            _ => Split::Test,
        };
    }
    write_corpus(&dir.join("toy.jsonl"), &corpus.samples).unwrap();
}

const FAST: &str = "[model.text]\nlayers = 1\n[train]\nbase_lr = 0.001\nbatch_size = 4\n";

#[test]
fn validate_accepts_a_well_formed_file() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 5);
    let out = xsum(dir.path(), &["validate", "--data", "toy.jsonl"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/validate/validation.json")).unwrap()).unwrap();
    assert_eq!(report["valid"], 5);
    assert_eq!(report["features_checked"], true);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("runs/validate/run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "validate");
    assert_eq!(manifest["versions"]["xsum"], xsum::VERSION);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);
    assert!(manifest["inputs"]["toy.jsonl"].is_string());
}

#[test]
fn validate_reports_bad_records_as_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 3);
    let mut text = fs::read_to_string(dir.path().join("toy.jsonl")).unwrap();
    text.push_str("{\"video_id\": \"broken\", \"duration_sec\": -1}\n");
    fs::write(dir.path().join("toy.jsonl"), text).unwrap();
    let out = xsum(dir.path(), &["validate", "--data", "toy.jsonl", "--out", "v"]);
    assert_eq!(code(&out), 1);
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "runtime");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("v/validation.json")).unwrap()).unwrap();
    assert_eq!(report["valid"], 3);
    assert_eq!(report["invalid"], 1);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 3);
    let out = xsum(dir.path(), &["evaluate", "--data", "toy.jsonl"]);
    assert_eq!(code(&out), 2);
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("--checkpoint") && text.contains("Usage"), "{text}");

    let out = xsum(dir.path(), &["stats", "--data", "toy.jsonl", "--no-such-flag"]);
    assert_eq!(code(&out), 2);

    fs::write(dir.path().join("bad.toml"), "[train]\nepochz = 3\n").unwrap();
    let out = xsum(dir.path(), &["stats", "--data", "toy.jsonl", "--config", "bad.toml"]);
    assert_eq!(code(&out), 2);
    assert_eq!(stderr_json(&out)["error"]["kind"], "usage");

    let out = xsum(dir.path(), &["train", "--data", "toy.jsonl", "--lambda-v", "0", "--lambda-t", "0"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_data_file_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = xsum(dir.path(), &["stats", "--data", "nope.jsonl"]);
    assert_eq!(code(&out), 1);
    let err = stderr_json(&out);
    assert_eq!(err["error"]["kind"], "runtime");
    assert!(err["error"]["message"].as_str().unwrap().contains("nope.jsonl"));
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 5);
    let out = xsum(dir.path(), &["train", "--data", "toy.jsonl", "--epochs", "0", "--out", "t"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let raw = xsum::checkpoint::load::<CheckpointHeader>(&dir.path().join("t/last.ckpt")).unwrap();
    assert_eq!(raw.header.epoch, 0);
    assert_eq!(raw.header.step, 0);
    assert!(raw.header.history.is_empty());
    assert!(raw.moments.is_empty());
    assert!(!dir.path().join("t/best.ckpt").exists());

    // A second plain run into the same directory would clobber it.
    let out = xsum(dir.path(), &["train", "--data", "toy.jsonl", "--epochs", "0", "--out", "t"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn training_needs_the_feature_store() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 3);
    let out = Command::new(env!("CARGO_BIN_EXE_xsum"))
        .args(["train", "--data", "toy.jsonl", "--epochs", "0"])
        .current_dir(dir.path())
        .env_remove("XSUM_CACHE")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr_json(&out)["error"]["message"].as_str().unwrap().contains("XSUM_CACHE"));
}

#[test]
fn plot_writes_four_histograms_and_matching_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 3);
    let out = xsum(dir.path(), &["plot", "--data", "toy.jsonl", "--out", "deep/new/plots"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let plots = dir.path().join("deep/new/plots");
    let svgs: Vec<_> = fs::read_dir(&plots)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    assert_eq!(svgs.len(), 4, "{svgs:?}");

    let sidecar: serde_json::Value = serde_json::from_str(&fs::read_to_string(plots.join("stats.json")).unwrap()).unwrap();
    let loaded = load_corpus(&dir.path().join("toy.jsonl"), &LoadOptions::default()).unwrap();
    let stats = compute_stats(&loaded.samples).unwrap();
    assert_eq!(sidecar["records"], 3);
    for (key, median) in [
        ("video_length", stats.video_length.median),
        ("ratio", stats.ratio.median),
        ("text_length", stats.text_length.median),
        ("span_center", stats.span_center.median),
    ] {
        assert_eq!(sidecar[key]["median"].as_f64().unwrap(), median, "{key}");
    }
}

#[test]
fn split_partitions_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 10);
    let out = xsum(dir.path(), &["split", "--data", "toy.jsonl", "--sizes", "6,2,2", "--seed", "3", "--out", "s"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let loaded = load_corpus(&dir.path().join("s/split.jsonl"), &LoadOptions::default()).unwrap();
    assert!(loaded.is_clean());
    let mut ids: Vec<_> = loaded.samples.iter().map(|s| s.id().to_string()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 10);
    let count = |sp| loaded.samples.iter().filter(|s| s.video.split == sp).count();
    assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (6, 2, 2));

    let out = xsum(dir.path(), &["split", "--data", "toy.jsonl", "--sizes", "6,2,1", "--out", "s2"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn summarize_output_passes_validate_and_evaluate_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 10);
    fs::write(dir.path().join("fast.toml"), FAST).unwrap();
    let ok = |out: Output| assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    ok(xsum(dir.path(), &["train", "--data", "toy.jsonl", "--config", "fast.toml", "--epochs", "2", "--out", "t"]));
    let log = fs::read_to_string(dir.path().join("t/metrics.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(dir.path().join("t/best.ckpt").exists());

    ok(xsum(
        dir.path(),
        &["summarize", "--data", "toy.jsonl", "--checkpoint", "t/last.ckpt", "--split", "all", "--max-gen-len", "12", "--out", "s"],
    ));
    let sel = fs::read_to_string(dir.path().join("s/selections.jsonl")).unwrap();
    assert_eq!(sel.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(sel.lines().next().unwrap()).unwrap();
    for key in ["video_id", "frame_count", "budget_ratio", "selected", "spans", "scores"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let sums = fs::read_to_string(dir.path().join("s/summaries.jsonl")).unwrap();
    let row: serde_json::Value = serde_json::from_str(sums.lines().next().unwrap()).unwrap();
    assert_eq!(row.as_object().unwrap().len(), 3);
    assert!(row["token_count"].as_u64().unwrap() <= 12);
    ok(xsum(
        dir.path(),
        &["validate", "--data", "toy.jsonl", "--selections", "s/selections.jsonl", "--summaries", "s/summaries.jsonl", "--out", "v"],
    ));

    // A tampered selection is caught.
    let bad = sel.replacen("\"budget_ratio\":0.15", "\"budget_ratio\":0.5", 1);
    fs::write(dir.path().join("bad.jsonl"), bad).unwrap();
    let out = xsum(dir.path(), &["validate", "--data", "toy.jsonl", "--selections", "bad.jsonl", "--out", "v2"]);
    assert_eq!(code(&out), 1);

    ok(xsum(dir.path(), &["finetune-score", "--data", "toy.jsonl", "--steps", "20", "--out", "f"]));
    let probe: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("f/probe.json")).unwrap()).unwrap();
    assert_eq!(probe["steps"], 20);
    assert_eq!(probe["probe_split"], "test");
    ok(xsum(
        dir.path(),
        &[
            "evaluate", "--data", "toy.jsonl", "--checkpoint", "t/best.ckpt", "--dual", "f/dual.ckpt", "--max-gen-len", "12",
            "--rank-target", "mean-curve", "--out", "e",
        ],
    ));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("e/report.json")).unwrap()).unwrap();
    assert_eq!(report["videos"], 2);
    for key in ["f1_avg", "f1_max", "kendall_tau", "spearman_rho", "bleu4", "rouge_l", "cider", "vt_clipscore"] {
        assert!(report[key].is_number(), "{key}: {}", report[key]);
    }
    let csv = fs::read_to_string(dir.path().join("e/per_video.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("video_id,frames,f1_avg"));
}

/// Every JSON output of a command, keyed by file name.
fn json_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json" || x == "jsonl"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn repeated_runs_produce_identical_json() {
    let dir = tempfile::tempdir().unwrap();
    toy_corpus(dir.path(), 10);
    fs::write(dir.path().join("fast.toml"), FAST).unwrap();
    let commands: Vec<Vec<&str>> = vec![
        vec!["train", "--data", "toy.jsonl", "--config", "fast.toml", "--epochs", "2", "--seed", "4", "--out", "r"],
        vec!["summarize", "--data", "toy.jsonl", "--checkpoint", "ckpt/last.ckpt", "--max-gen-len", "8", "--out", "r"],
        vec!["evaluate", "--data", "toy.jsonl", "--checkpoint", "ckpt/last.ckpt", "--max-gen-len", "8", "--out", "r"],
        vec!["stats", "--data", "toy.jsonl", "--out", "r"],
        vec!["split", "--data", "toy.jsonl", "--seed", "2", "--out", "r"],
        vec!["finetune-score", "--data", "toy.jsonl", "--steps", "5", "--out", "r"],
        vec!["plot", "--data", "toy.jsonl", "--out", "r"],
    ];
    for args in commands {
        if args[0] == "summarize" {
            // Give the inference commands a fixed checkpoint.
            let out = xsum(dir.path(), &["train", "--data", "toy.jsonl", "--config", "fast.toml", "--epochs", "1", "--out", "ckpt"]);
            assert_eq!(code(&out), 0);
        }
        let mut runs = Vec::new();
        for attempt in 0..2 {
            let out = xsum(dir.path(), &args);
            assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
            let moved = dir.path().join(format!("{}-{attempt}", args[0]));
            fs::rename(dir.path().join("r"), &moved).unwrap();
            runs.push(json_outputs(&moved));
        }
        assert!(runs[0].iter().any(|(n, _)| n == "run.json"));
        assert_eq!(runs[0], runs[1], "{args:?}");
    }
}
