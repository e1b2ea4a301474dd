use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &str = r#"
[model]
d_model = 16
n_heads = 2
d_ff = 32
layers = 1
dropout = 0.1

[train]
steps = 20
batch_tokens = 256
madeup = 8

[optim]
warmup_steps = 5
peak_lr = 0.003
"#;

fn cer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cer"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(
        o.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

/// Small reversal corpus over 8 words.
fn corpus(dir: &Path) -> (PathBuf, PathBuf) {
    let mut src = String::new();
    let mut tgt = String::new();
    for i in 0..60 {
        let words: Vec<usize> = (0..3 + i % 4).map(|k| (i * 7 + k * 3) % 8).collect();
        let s: Vec<String> = words.iter().map(|w| format!("s{w}")).collect();
        let t: Vec<String> = words.iter().rev().map(|w| format!("t{w}")).collect();
        src += &(s.join(" ") + "\n");
        tgt += &(t.join(" ") + "\n");
    }
    (write(dir, "train.src", &src), write(dir, "train.tgt", &tgt))
}

#[test]
fn evaluate_identical_files_prints_100() {
    let dir = TempDir::new().unwrap();
    let f = write(dir.path(), "a.txt", "the cat sat on the mat\na b c d e\n");
    let out = stdout(&cer(&["evaluate", "--hyp", p(&f), "--ref", p(&f)]));
    assert_eq!(out.trim(), "100.00");
}

#[test]
fn evaluate_reads_numbered_references() {
    let dir = TempDir::new().unwrap();
    let hyp = write(dir.path(), "hyp", "a b c d\nx y z\np z\n");
    write(dir.path(), "ref.0", "a b c d e\nx y\np q r s t u\n");
    write(dir.path(), "ref.1", "a b\nx y z w\np q r\n");
    let out = stdout(&cer(&[
        "evaluate",
        "--hyp",
        p(&hyp),
        "--ref",
        p(&dir.path().join("ref")),
    ]));
    let expect = 100.0 * (1.0f64 - 10.0 / 9.0).exp() * (8.0 / 9.0 * 5.0 / 6.0f64).powf(0.25);
    assert_eq!(out.trim(), format!("{expect:.2}"));

    let missing = cer(&[
        "evaluate",
        "--hyp",
        p(&hyp),
        "--ref",
        p(&dir.path().join("nope")),
    ]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("no reference file"));
}

#[test]
fn bad_arguments_fail_with_a_message() {
    let dir = TempDir::new().unwrap();
    let (src, tgt) = corpus(dir.path());
    let out = cer(&[
        "train",
        "--src",
        p(&src),
        "--tgt",
        p(&tgt),
        "--variant",
        "cer-x",
        "--out",
        "m",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));
}

#[test]
fn gradcheck_passes() {
    let out = stdout(&cer(&["gradcheck"]));
    assert_eq!(out.lines().count(), 5);
    assert!(!out.contains("FAIL"));
}

#[test]
fn train_translate_evaluate_ablate_finetune() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let (src, tgt) = corpus(d);
    let cfg = write(d, "tiny.toml", TINY);
    let base = d.join("base.ckpt");
    stdout(&cer(&[
        "train",
        "--src",
        p(&src),
        "--tgt",
        p(&tgt),
        "--config",
        p(&cfg),
        "--variant",
        "baseline",
        "--out",
        p(&base),
    ]));
    for suffix in [".src.vocab", ".tgt.vocab", ".log.jsonl"] {
        assert!(d.join(format!("base.ckpt{suffix}")).exists(), "{suffix}");
    }
    let log = fs::read_to_string(d.join("base.ckpt.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 20);

    let with = stdout(&cer(&[
        "translate",
        "--checkpoint",
        p(&base),
        "--input",
        p(&src),
        "--greedy",
    ]));
    let without = stdout(&cer(&[
        "translate",
        "--checkpoint",
        p(&base),
        "--input",
        p(&src),
        "--greedy",
        "--no-nal",
    ]));
    assert_eq!(with, without);
    assert_eq!(with.lines().count(), 60);

    let eval = stdout(&cer(&[
        "evaluate",
        "--checkpoint",
        p(&base),
        "--src",
        p(&src),
        "--ref",
        p(&tgt),
        "--greedy",
    ]));
    let json = d.join("report.json");
    let tsv = d.join("report.tsv");
    stdout(&cer(&[
        "ablate",
        "--checkpoint",
        p(&base),
        "--src",
        p(&src),
        "--ref",
        p(&tgt),
        "--rates",
        "0",
        "--seeds",
        "1",
        "--greedy",
        "--json",
        p(&json),
        "--tsv",
        p(&tsv),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    let bleu = report[0]["bleu"].as_f64().unwrap();
    assert_eq!(format!("{:.2}", 100.0 * bleu), eval.trim());
    assert!(fs::read_to_string(&tsv)
        .unwrap()
        .starts_with("rate\tsystem\tmean\tsd\n"));

    let tuned = d.join("tuned.ckpt");
    stdout(&cer(&[
        "finetune",
        "--base",
        p(&base),
        "--src",
        p(&src),
        "--tgt",
        p(&tgt),
        "--config",
        p(&cfg),
        "--variant",
        "cer",
        "--steps",
        "5",
        "--out",
        p(&tuned),
    ]));
    let on = stdout(&cer(&[
        "translate",
        "--checkpoint",
        p(&tuned),
        "--input",
        p(&src),
        "--nal-active",
    ]));
    assert_eq!(on.lines().count(), 60);
    let both = cer(&[
        "ablate",
        "--checkpoint",
        p(&base),
        "--checkpoint",
        p(&tuned),
        "--src",
        p(&src),
        "--ref",
        p(&tgt),
        "--rates",
        "0,0.2",
        "--seeds",
        "1,2",
        "--greedy",
    ]);
    let records: serde_json::Value = serde_json::from_str(&stdout(&both)).unwrap();
    assert_eq!(records.as_array().unwrap().len(), 8);
}
