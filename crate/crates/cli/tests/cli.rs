use std::path::Path;
use std::process::{Command, Output};

fn ehct(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ehct")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{
  "epochs": 1,
  "batch_size": 2,
  "ablation": "full",
  "model": {
    "hct": { "stage_channels": [4, 8, 12, 16], "attention_heads": 2, "input_size": 32, "decoder_dim": 8 },
    "token_heads": 2,
    "head_hidden": 4
  }
}"#;

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let out = ehct(&["synth", "--out", s(&data), "--count", "3", "--size", "64"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let tiles = root.join("tiles");
    let out = ehct(&["tile", "--manifest", s(&data.join("manifest.json")), "--tile", "32", "--out", s(&tiles)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tiles.join("A/synth_00002_r1_c1.png").is_file());

    let cfg = root.join("cfg.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let run = root.join("run");
    let manifest = tiles.join("manifest.json");
    let out = ehct(&["train", "--train", s(&manifest), "--out", s(&run), "--config", s(&cfg), "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(run.join("log.jsonl")).unwrap();
    // 12 tiles at batch 2 is 6 steps, plus one epoch record
    assert_eq!(log.lines().count(), 7);
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("train_config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 5);

    let ck = run.join("best.safetensors");
    let report = root.join("report.json");
    let out =
        ehct(&["eval", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--json", s(&report), "--config", s(&cfg)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("Precision"));
    assert!(report.is_file());

    let out = ehct(&[
        "eval",
        "--checkpoint",
        s(&ck),
        "--manifest",
        s(&manifest),
        "--config",
        s(&cfg),
        "--ablation",
        "baseline",
    ]);
    assert_eq!(out.status.code(), Some(2), "hash mismatch must be refused");

    let preds = root.join("pred");
    let out = ehct(&["predict", "--checkpoint", s(&ck), "--manifest", s(&manifest), "--out", s(&preds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pred = preds.join("synth_00000_r0_c0.png");
    assert!(pred.is_file());

    let viz = root.join("viz");
    let a = tiles.join("A/synth_00000_r0_c0.png");
    let b = tiles.join("B/synth_00000_r0_c0.png");
    let out = ehct(&["visualize", "--checkpoint", s(&ck), "--a", s(&a), "--b", s(&b), "--out", s(&viz)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_dir(&viz).unwrap().count(), 9);

    let dm = root.join("diff.png");
    let gt = tiles.join("label/synth_00000_r0_c0.png");
    let out = ehct(&["diffmap", "--pred", s(&pred), "--gt", s(&gt), "--out", s(&dm)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dm.is_file());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = ehct(&["train", "--train", s(&missing), "--out", s(dir.path()), "--ablation", "+RMI"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ehct(&["train", "--train", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let out = ehct(&["synth", "--out", s(dir.path()), "--size", "40"]);
    assert_eq!(out.status.code(), Some(3));
    let out = ehct(&["bogus"]);
    assert_eq!(out.status.code(), Some(2));
}
