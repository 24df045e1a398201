use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ccan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccan"))
        .args(args)
        .env_remove("CCAN_SEED")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"{
  "model": {"d_model": 16, "n_heads": 2, "enc_layers": 1, "dec_layers": 2, "d_ff": 16,
            "win": 3, "ccan_layers": [1, 2], "max_len": 12},
  "optim": {"steps": 6, "eval_every": 3, "batch_size": 8, "warmup": 2}
}"#;

fn gen(dir: &Path) {
    let o = ccan(&[
        "gen-data", "--task", "local-fusion", "--vocab-size", "8", "--min-len", "3", "--max-len", "6",
        "--train", "40", "--valid", "8", "--test", "8", "--seed", "3", "--out", p(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn run_args<'a>(dir: &'a Path, cfg: &'a str, out: &'a str) -> Vec<String> {
    vec![
        "--config".into(),
        cfg.into(),
        "--train".into(),
        p(&dir.join("train.jsonl")).into(),
        "--valid".into(),
        p(&dir.join("valid.jsonl")).into(),
        "--vocab".into(),
        p(&dir.join("vocab.txt")).into(),
        "--out".into(),
        out.into(),
    ]
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&ccan(&["--help"])), 0);
    assert_eq!(code(&ccan(&[])), 1);
    assert_eq!(code(&ccan(&["train", "--no-such-flag"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let o = ccan(&["gen-data", "--task", "reverse", "--out", p(dir.path())]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("copy") && err.contains("local-fusion") && err.contains("global-sort"));
}

#[test]
fn missing_and_malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let o = ccan(&["eval", "--hyps", p(&missing), "--refs", p(&missing)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.jsonl"));

    gen(dir.path());
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"src\":[\"w1\"],\"tgt\":[\"w1\"]}\nnot json\n").unwrap();
    let mut args = vec!["train".to_string()];
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    args.extend(run_args(dir.path(), p(&cfg), p(&dir.path().join("run"))));
    args[4] = p(&bad).into();
    let o = ccan(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));

    let o = ccan(&["analyze-le", "--dump", p(&bad)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn invalid_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"model": {"d_model": 15, "n_heads": 4}}"#).unwrap();
    let mut args = vec!["train".to_string()];
    args.extend(run_args(dir.path(), p(&cfg), p(&dir.path().join("run"))));
    assert_eq!(code(&ccan(&args.iter().map(String::as_str).collect::<Vec<_>>())), 1);
    fs::write(&cfg, r#"{"modle": {}}"#).unwrap();
    assert_eq!(code(&ccan(&args.iter().map(String::as_str).collect::<Vec<_>>())), 1);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let cfg = dir.path().join("tiny.json");
    fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    let mut args = vec!["train".to_string()];
    args.extend(run_args(dir.path(), p(&cfg), p(&out)));
    args.extend(["--steps".into(), "4".into(), "--win".into(), "5".into()]);
    let o = ccan(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().last().unwrap().split(',').next().unwrap(), "4");
    let saved: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["model"]["win"], 5);
    assert_eq!(saved["model"]["d_model"], 16);
    assert_eq!(saved["optim"]["batch_size"], 8);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d);
    let cfg = d.join("tiny.json");
    fs::write(&cfg, TINY).unwrap();

    let mut args = vec!["train".to_string()];
    args.extend(run_args(d, p(&cfg), p(&d.join("nat"))));
    let o = ccan(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = d.join("nat/best.ckpt");
    assert!(ckpt.exists());

    let test = d.join("test.jsonl");
    let hyp = d.join("hyp.txt");
    let dump = d.join("dump.jsonl");
    let o = ccan(&[
        "translate", "--checkpoint", p(&ckpt), "--input", p(&test), "--output", p(&hyp),
        "--iterations", "3", "--dump-attn", p(&dump), "--mode", "nat",
        "--vocab", p(&d.join("vocab.txt")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&hyp).unwrap().lines().count(), 8);

    let o = ccan(&["translate", "--checkpoint", p(&ckpt), "--input", p(&test), "--output", p(&hyp), "--mode", "at"]);
    assert_eq!(code(&o), 1);

    let le = d.join("le.json");
    assert_eq!(code(&ccan(&["analyze-le", "--dump", p(&dump), "--out", p(&le)])), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&le).unwrap()).unwrap();
    let corpus = v["metrics"]["corpus_le"].as_f64().unwrap();
    assert!(corpus >= 0.0 && corpus <= 4.0, "{corpus}");

    let gates = d.join("gates.json");
    assert_eq!(code(&ccan(&["analyze-gates", "--dump", p(&dump), "--out", p(&gates)])), 0);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&gates).unwrap()).unwrap();
    assert_eq!(v["series"]["gate_importance"].as_array().unwrap().len(), 2);

    let o = ccan(&["eval", "--hyps", p(&hyp), "--refs", p(&test)]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["metrics"]["bleu"].as_f64().is_some());

    let ng = d.join("ngrams.json");
    assert_eq!(code(&ccan(&["analyze-ngrams", "--a", p(&hyp), "--b", p(&hyp), "--refs", p(&test), "--out", p(&ng)])), 0);

    let rep = d.join("report");
    let o = ccan(&["report", "--out", p(&rep), p(&le), p(&gates), p(&ng)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(rep.join("report.json").exists());
    assert!(rep.join("metrics.csv").exists());
}
