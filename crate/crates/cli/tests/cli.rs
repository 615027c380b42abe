use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "seed": 3,
  "denoise": {"train_count": 40, "test_count": 8, "lstm_size": 6, "steps": 20, "batch_size": 8},
  "caption": {"train_count": 40, "test_count": 8, "lstm_size": 8, "embed_size": 6, "epochs": 1, "batch_size": 8,
              "beam_size": 3, "classifier_hidden": 8, "classifier_epochs": 2}
}"#;

fn midout(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_midout")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn with_config() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn gen_data_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    ok(&midout(dir.path(), &["gen-data", "--task", "denoise", "--out", "a"]));
    ok(&midout(dir.path(), &["gen-data", "--task", "denoise", "--out", "b"]));
    let lines = |p: &str| std::fs::read_to_string(dir.path().join(p)).unwrap().lines().count();
    assert_eq!(lines("a/train.jsonl"), 1000);
    assert_eq!(lines("a/test.jsonl"), 100);
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(dir.path().join("a").join(f)).unwrap(), std::fs::read(dir.path().join("b").join(f)).unwrap());
    }
    ok(&midout(dir.path(), &["gen-data", "--task", "denoise", "--seed", "1", "--out", "c"]));
    assert_ne!(std::fs::read(dir.path().join("a/test.jsonl")).unwrap(), std::fs::read(dir.path().join("c/test.jsonl")).unwrap());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"task": "caption", "caption": {"epochz": 2}}"#).unwrap();
    let out = midout(dir.path(), &["gen-data", "--config", "bad.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(midout(dir.path(), &["gen-data", "--bogus"]).status.code(), Some(1));
    assert_eq!(midout(dir.path(), &["experiment", "table9"]).status.code(), Some(1));
    assert_eq!(midout(dir.path(), &["eval", "--checkpoint", "missing.ckpt"]).status.code(), Some(1));
    assert_eq!(midout(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn denoise_train_eval_generate() {
    let dir = with_config();
    let d = dir.path();
    ok(&midout(d, &["gen-data", "--config", "tiny.json", "--task", "denoise", "--out", "data"]));
    ok(&midout(d, &["train", "--config", "tiny.json", "--task", "denoise", "--model", "middleout", "--data", "data", "--checkpoint", "m.ckpt", "--loss-csv", "loss.csv", "--quiet"]));
    assert_eq!(&std::fs::read(d.join("m.ckpt")).unwrap()[..4], b"MODC");
    let loss = std::fs::read_to_string(d.join("loss.csv")).unwrap();
    assert!(loss.starts_with("step,loss\n"));
    assert_eq!(loss.lines().count(), 21);

    let a = ok(&midout(d, &["eval", "--checkpoint", "m.ckpt", "--data", "data", "--out", "metrics.csv"]));
    let b = ok(&midout(d, &["eval", "--checkpoint", "m.ckpt"]));
    assert_eq!(a, b, "the checkpoint's config regenerates the same test split");
    assert_eq!(std::fs::read_to_string(d.join("metrics.csv")).unwrap(), a);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], "experiment,model,metric,value,seed");
    assert!(lines[1].starts_with("eval,middleout,mse,"));
    assert!(lines[2].starts_with("eval,middleout,symmetric_mse,"));

    let out = ok(&midout(d, &["generate", "--checkpoint", "m.ckpt", "--input", "data/test.jsonl", "--index", "2"]));
    let values: Vec<f64> = out.trim().split(',').map(|v| v.parse().unwrap()).collect();
    let test: Vec<midout::denoise::DenoiseSample> = midout::jsonl::read_jsonl(&d.join("data/test.jsonl")).unwrap();
    assert_eq!(values.len(), test[2].len());
    assert!(values.iter().all(|v| v.is_finite()));
}

#[test]
fn caption_generation_honors_the_middle_word() {
    let dir = with_config();
    let d = dir.path();
    ok(&midout(d, &["gen-data", "--config", "tiny.json", "--task", "caption", "--out", "data"]));
    ok(&midout(d, &["train", "--config", "tiny.json", "--task", "caption", "--model", "middleout", "--data", "data", "--checkpoint", "c.ckpt", "--loss-csv", "loss.csv", "--quiet"]));
    let out = ok(&midout(d, &["generate", "--checkpoint", "c.ckpt", "--input", "data/test.jsonl", "--index", "0", "--concat", "1", "--middle-word", "performing", "--beam", "4", "--show", "4"]));
    let captions: Vec<&str> = out.lines().collect();
    assert_eq!(captions.len(), 4);
    for c in captions {
        assert!(c.split(' ').any(|w| w == "performing"), "{c}");
    }
    let free = ok(&midout(d, &["generate", "--checkpoint", "c.ckpt", "--input", "data/test.jsonl"]));
    assert_eq!(free.lines().count(), 8);

    let out = midout(d, &["generate", "--checkpoint", "c.ckpt", "--input", "data/test.jsonl", "--index", "0", "--middle-word", "juggling"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("juggling"));

    let metrics = ok(&midout(d, &["eval", "--checkpoint", "c.ckpt", "--data", "data"]));
    for m in ["classifier_accuracy", "bleu4", "rouge_l", "bleu4_oracle", "rouge_l_oracle"] {
        assert!(metrics.contains(&format!("eval,middleout,{m},")), "{metrics}");
    }
}

#[test]
fn gradcheck_experiment_passes_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(&midout(dir.path(), &["experiment", "gradcheck", "--out", "g.csv", "--quiet"]));
    assert!(out.contains("PASS [gradcheck]"));
    assert!(!out.contains("FAIL"));
    let csv = std::fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert!(csv.starts_with("experiment,model,metric,value,seed\n"));
}

#[test]
fn failed_verdict_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("short.json"),
        r#"{"denoise": {"train_count": 8, "test_count": 4, "lstm_size": 3, "steps": 1, "batch_size": 4}}"#,
    )
    .unwrap();
    let out = midout(dir.path(), &["experiment", "table1", "--config", "short.json", "--quiet"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL [table1]"));
    let csv = std::fs::read_to_string(dir.path().join("table1.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("table1,middleout,mse,")), "{csv}");
}
