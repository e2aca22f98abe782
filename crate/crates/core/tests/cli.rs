#![cfg(feature = "cli")]

use std::path::Path;
use std::process::{Command, Output};

fn cli(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mentorloop"));
    cmd.current_dir(dir).env("RUST_LOG", "warn");
    for set in [
        "dataset.counts.train_original=48",
        "dataset.counts.eval_original=16",
        "dataset.counts.pool_new=32",
        "dataset.counts.eval_new=16",
        "baseline.epochs=1",
        "retrain.epochs=1",
        "mining.class_thresholds=[0.01,0.01,0.01]",
    ] {
        cmd.args(["--set", set]);
    }
    cmd.args(args).output().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "status {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let gen = json(&cli(d, &["--json", "gen-data"]));
    let hash = gen["config_hash"].as_str().unwrap().to_string();
    assert!(d.join("work/data/manifest.json").exists());
    assert!(d.join("work/data/images").read_dir().unwrap().count() == 112);

    json(&cli(d, &["--json", "train-baseline"]));
    let log = std::fs::read_to_string(d.join("work/reports/baseline/train_log.jsonl")).unwrap();
    assert!(log.lines().count() > 0);

    let mined = json(&cli(d, &["--json", "mine"]));
    assert!(mined["created"].as_u64().unwrap() > 0);
    let again = json(&cli(d, &["--json", "mine"]));
    assert_eq!(again["created"], 0);

    let done = json(&cli(d, &["--json", "oracle-annotate"]));
    assert_eq!(done["progress"]["open"], 0);
    assert!(d.join("work/data/partial").read_dir().unwrap().count() > 0);

    let exp = json(&cli(d, &["--json", "expand", "--omnia", "--healthy"]));
    assert!(exp["annotated_cells_after"].as_u64() >= exp["annotated_cells_before"].as_u64());

    let ret = json(&cli(d, &["--json", "retrain", "--omnia", "--dann"]));
    assert_eq!(ret["recipe"], "omnia+dann");
    let ckpt = ret["checkpoint"].as_str().unwrap().to_string();
    assert!(d.join("work/reports/omnia+dann/train_log.jsonl").exists());

    let ev = json(&cli(d, &["--json", "eval", "--checkpoint", &ckpt]));
    assert_eq!(ev["config_hash"], hash.as_str());
    assert!(ev["report"]["domains"]["new"]["map"].is_number());
    assert!(d.join("work/reports/omnia+dann/eval.json").exists());
    let table: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("work/reports/report.json")).unwrap()).unwrap();
    assert!(table.get("omnia+dann").is_some());

    let em = json(&cli(d, &["--json", "embed", "--checkpoint", &ckpt, "--max-points", "60"]));
    assert!(em["rows"].as_u64().unwrap() > 0);
    let emb = std::fs::read_to_string(d.join("work/reports/omnia+dann/embeddings.csv")).unwrap();
    assert!(emb.starts_with("domain,class_id,f0,"));
    let ts = std::fs::read_to_string(d.join("work/reports/omnia+dann/tsne.csv")).unwrap();
    assert!(ts.starts_with("domain,class_id,x,y"));

    let mismatch = cli(d, &["eval", "--checkpoint", &ckpt, "--set", "dataset.seed=99"]);
    assert_eq!(mismatch.status.code(), Some(2));
    let forced = cli(
        d,
        &["eval", "--checkpoint", &ckpt, "--set", "dataset.seed=99", "--force"],
    );
    // The checkpoint check passes but the dataset on disk still belongs to
    // the original config.
    assert_eq!(forced.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["--set", "no.such.key=1", "gen-data"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["expand"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_artifacts_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["train-baseline"]).status.code(), Some(2));
    assert_eq!(cli(dir.path(), &["eval", "--checkpoint", "nope.ckpt"]).status.code(), Some(2));
}
