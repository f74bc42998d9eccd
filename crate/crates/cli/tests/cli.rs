use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use conceptlens::concept::ProjectionMatrix;
use conceptlens::eval::{evaluate, EvalMode, LabelSpace, Scorer};
use conceptlens::manifest::Manifest;
use conceptlens::store::{load_embeddings, read_names, EmbeddingKind};
use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_conceptlens");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Fixture plus a short training run; returns the trained manifest.
fn trained(dir: &Path) -> PathBuf {
    let fx = dir.join("fx");
    ok(&["synth", "--out", s(&fx), "--grids", "4"]);
    let tr = dir.join("tr");
    ok(&[
        "--manifest",
        s(&fx.join("manifest.json")),
        "--out",
        s(&tr),
        "train",
        "--iters",
        "50",
        "--batch",
        "32",
    ]);
    tr.join("manifest.json")
}

/// Report files in `dir`, run logs excluded.
fn reports(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with(".log.json") {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

fn json(p: &Path) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn subcommands_are_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let m = trained(dir.path());
    let fx_manifest = dir.path().join("fx/manifest.json");
    let cases: Vec<(&Path, Vec<&str>)> = vec![
        (&fx_manifest, vec!["split", "--ratio", "0.7"]),
        (&fx_manifest, vec!["train", "--iters", "30", "--batch", "16"]),
        (&m, vec!["eval", "--mode", "gzsl"]),
        (&m, vec!["eval", "--mode", "zsl"]),
        (&m, vec!["fidelity"]),
        (&m, vec!["explain", "--top-k", "4", "--class", "class_00"]),
        (&m, vec!["retrieve", "--concept", "concept_002", "--top-k", "7"]),
        (&m, vec!["ablate", "--ns", "1,3", "--sample", "50"]),
        (&m, vec!["align", "--positive", "0", "--negative", "1", "--heatmaps"]),
        (&m, vec!["analyze", "--top-k", "3"]),
    ];
    for (i, (manifest, args)) in cases.iter().enumerate() {
        let mut outs = Vec::new();
        for (run_id, threads) in ["1", "4", "4"].iter().enumerate() {
            let out = dir.path().join(format!("det{i}_{run_id}"));
            let mut full = vec![
                "--manifest",
                s(manifest),
                "--out",
                s(&out),
                "--threads",
                threads,
                "--seed",
                "3",
            ];
            full.extend(args.iter().copied());
            ok(&full);
            outs.push(reports(&out));
        }
        assert!(!outs[0].is_empty());
        assert_eq!(outs[0], outs[1], "{args:?}: threads 1 vs 4");
        assert_eq!(outs[1], outs[2], "{args:?}: repeated run");
    }
}

#[test]
fn eval_matches_library_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let m = trained(dir.path());
    let out = dir.path().join("ev");
    ok(&["--manifest", s(&m), "--out", s(&out), "eval", "--mode", "gzsl"]);
    let report = json(&out.join("eval_report.json"));

    let man = Manifest::load(&m).unwrap();
    let images = load_embeddings(&man.resolve(man.files.images.as_ref().unwrap()), EmbeddingKind::Image).unwrap();
    let labels = read_names(&man.resolve(man.files.image_labels.as_ref().unwrap())).unwrap();
    let classes = load_embeddings(
        &man.resolve(man.files.classes.as_ref().unwrap()),
        EmbeddingKind::ClassText,
    )
    .unwrap();
    let a = ProjectionMatrix::load(&man.resolve(man.files.projection.as_ref().unwrap()), true).unwrap();
    let space = LabelSpace::from_split(classes.names(), &man.class_split(classes.names()).unwrap()).unwrap();
    let want = evaluate(&images, &labels, &space, &classes, Scorer::Concept(&a), EvalMode::Gzsl).unwrap();
    let got = &report["result"]["concept"];
    assert_eq!(got["acc_seen"].as_f64().unwrap(), want.acc_seen);
    assert_eq!(got["acc_unseen"].as_f64().unwrap(), want.acc_unseen);
    assert_eq!(got["harmonic_mean"].as_f64().unwrap(), want.harmonic_mean);
    assert_eq!(report["config"]["projection_trained"], Value::Bool(true));
}

#[test]
fn train_writes_projection_trace_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = trained(dir.path());
    let tr = m.parent().unwrap();
    for f in [
        "projection.ezt",
        "projection.names",
        "trace.csv",
        "train_report.json",
        "train.log.json",
    ] {
        assert!(tr.join(f).exists(), "{f}");
    }
    let trace = fs::read_to_string(tr.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 51);
    let log = json(&tr.join("train.log.json"));
    assert_eq!(log["config_hash"].as_str().unwrap().len(), 64);
    assert!(log["inputs"]
        .as_array()
        .unwrap()
        .iter()
        .all(|i| i["sha256"].as_str().unwrap().len() == 64));
    assert!(log["timestamp_unix"].as_u64().unwrap() > 0);
    let report = json(&tr.join("train_report.json"));
    assert_eq!(report["config"]["iterations"], 50);
    assert!(report.get("timestamp_unix").is_none());
}

#[test]
fn flags_override_manifest_training_block() {
    let dir = tempfile::tempdir().unwrap();
    let m = trained(dir.path());
    let out = dir.path().join("again");
    ok(&[
        "--manifest",
        s(&m),
        "--out",
        s(&out),
        "train",
        "--iters",
        "3",
        "--lambda",
        "5",
    ]);
    let r = json(&out.join("train_report.json"));
    assert_eq!(r["config"]["iterations"], 3);
    assert_eq!(r["config"]["lambda"], 5.0);
    assert_eq!(r["config"]["batch_size"], 32);
}

#[test]
fn split_ceiling_rule_from_class_file() {
    let dir = tempfile::tempdir().unwrap();
    let names = dir.path().join("classes.txt");
    fs::write(&names, "a\nb\nc\n").unwrap();
    let out = dir.path().join("sp");
    ok(&[
        "--out",
        s(&out),
        "--seed",
        "4",
        "split",
        "--ratio",
        "0.5",
        "--classes",
        s(&names),
    ]);
    let r = json(&out.join("split.json"));
    assert_eq!(r["seen"].as_array().unwrap().len(), 2);
    assert_eq!(r["unseen"].as_array().unwrap().len(), 1);

    fs::write(&names, "only\n").unwrap();
    assert_eq!(
        run(&["--out", s(&out), "split", "--classes", s(&names)]).status.code(),
        Some(2)
    );
}

#[test]
fn ablate_reports_both_modes_per_n() {
    let dir = tempfile::tempdir().unwrap();
    let m = trained(dir.path());
    let out = dir.path().join("ab");
    ok(&[
        "--manifest",
        s(&m),
        "--out",
        s(&out),
        "ablate",
        "--ns",
        "1,3,5,10",
        "--mode",
        "both",
    ]);
    let r = json(&out.join("ablation_report.json"));
    let results = r["result"]["results"].as_array().unwrap();
    assert_eq!(results.len(), 8);
    let drops = fs::read_to_string(out.join("ablation_drops.csv")).unwrap();
    assert!(drops.starts_with("n,mode,image,drop\n"));
    assert_eq!(drops.lines().count(), 1 + 8 * 200);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    ok(&["synth", "--out", s(&fx), "--grids", "0"]);
    let man = fx.join("manifest.json");
    let diverge = run(&[
        "--manifest",
        s(&man),
        "--out",
        s(&dir.path().join("d")),
        "train",
        "--iters",
        "20",
        "--lr",
        "1e300",
        "--batch",
        "10",
    ]);
    assert_eq!(diverge.status.code(), Some(3));
    let invalid = run(&[
        "--manifest",
        s(&man),
        "--out",
        s(&dir.path().join("v")),
        "train",
        "--temperature",
        "0",
    ]);
    assert_eq!(invalid.status.code(), Some(2));
    let missing = run(&[
        "--manifest",
        s(&man),
        "--out",
        s(&dir.path().join("a")),
        "align",
        "--positive",
        "0",
        "--negative",
        "1",
    ]);
    assert_eq!(missing.status.code(), Some(2));
    let unknown = run(&[
        "--manifest",
        s(&man),
        "--out",
        s(&dir.path().join("r")),
        "retrieve",
        "--concept",
        "nope",
    ]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("nope"));
    fs::remove_file(fx.join("images.ezt")).unwrap();
    let gone = run(&["--manifest", s(&man), "--out", s(&dir.path().join("e")), "eval"]);
    assert_eq!(gone.status.code(), Some(2));
}
