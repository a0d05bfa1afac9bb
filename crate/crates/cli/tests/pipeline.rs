use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctrsgen::corpus::RawQuadruple;
use ctrsgen::synthetic::{synthetic_corpus, SyntheticSpec};
use ctrsgen::training::{Checkpoint, TrainConfig};

fn ctrsgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctrsgen"))
        .args(args)
        .env("CTRSGEN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = ctrsgen(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_raw_corpus(path: &Path, instances: usize) {
    let spec = SyntheticSpec {
        instances,
        ..SyntheticSpec::default()
    };
    let docs = |d: &[Vec<Vec<String>>]| -> Vec<Vec<String>> {
        d.iter()
            .map(|doc| doc.iter().map(|s| s.join(" ")).collect())
            .collect()
    };
    let lines: Vec<String> = synthetic_corpus(&spec, 5)
        .iter()
        .map(|q| {
            let raw = RawQuadruple {
                id: Some(q.id.clone()),
                query: q.query.join(" "),
                relevant: docs(&q.relevant_docs),
                irrelevant: docs(&q.irrelevant_docs),
                description: q.description.join(" "),
                meta: q.meta.clone(),
            };
            serde_json::to_string(&raw).unwrap()
        })
        .collect();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn prep_train_generate_eval() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("corpus.jsonl");
    write_raw_corpus(&raw, 12);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let conf = dir.path().join("tiny.conf");
    fs::write(
        &conf,
        "hidden = 4\nembedding_dim = 5\nbatch_size = 4\nepochs = 3\n",
    )
    .unwrap();

    ok(&[
        "prep",
        "--input",
        s(&raw),
        "--out",
        s(&data),
        "--split",
        "8,2,2",
        "--config",
        s(&conf),
    ]);
    for f in [
        "vocab.txt",
        "train.jsonl",
        "valid.jsonl",
        "test.jsonl",
        "stats.json",
        "config.effective",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(data.join("train.jsonl"))
            .unwrap()
            .lines()
            .count(),
        8
    );

    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--config",
        s(&conf),
        "--epochs",
        "2",
    ]);
    let log = fs::read_to_string(run.join("loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    let ckpt = Checkpoint::load(run.join("last.ckpt")).unwrap();
    assert_eq!(
        (ckpt.epoch, ckpt.config.epochs, ckpt.config.hidden),
        (2, 2, 4)
    );
    assert!(run.join("best.ckpt").exists());

    ok(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--resume",
        s(&run.join("last.ckpt")),
        "--epochs",
        "3",
    ]);
    assert_eq!(Checkpoint::load(run.join("last.ckpt")).unwrap().epoch, 3);
    let changed = ctrsgen(&[
        "train",
        "--data",
        s(&data),
        "--out",
        s(&run),
        "--resume",
        s(&run.join("last.ckpt")),
        "--hidden",
        "6",
    ]);
    assert!(!changed.status.success());

    let test = data.join("test.jsonl");
    let best = run.join("best.ckpt");
    let out = ok(&[
        "generate",
        "--checkpoint",
        s(&best),
        "--input",
        s(&test),
        "--max-len",
        "10",
    ]);
    let lines: Vec<serde_json::Value> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert!(lines
        .iter()
        .all(|v| v["id"].is_string() && v["description"].is_string()));

    let beam_file = dir.path().join("beam.jsonl");
    ok(&[
        "generate",
        "--checkpoint",
        s(&best),
        "--input",
        s(&raw),
        "--raw",
        "--beam",
        "3",
        "--output",
        s(&beam_file),
    ]);
    assert_eq!(fs::read_to_string(&beam_file).unwrap().lines().count(), 12);

    let report_dir = dir.path().join("report");
    ok(&[
        "eval",
        "--checkpoint",
        s(&best),
        "--input",
        s(&test),
        "--out",
        s(&report_dir),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["count"], 2);
    for key in ["rouge1_recall", "rouge2_recall", "rougeL_recall"] {
        let v = report["overall"][key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} = {v}");
    }
    assert!(report_dir.join("report.tsv").exists());
    assert!(report_dir.join("config.effective").exists());

    let attn = dir.path().join("attn");
    ok(&[
        "inspect-attention",
        "--checkpoint",
        s(&best),
        "--input",
        s(&test),
        "--out",
        s(&attn),
        "--max-len",
        "5",
    ]);
    let tables: Vec<_> = fs::read_dir(&attn).unwrap().collect();
    assert_eq!(tables.len(), 2);
    let first = fs::read_to_string(tables[0].as_ref().unwrap().path()).unwrap();
    assert!(first.starts_with("step\tsentence_index\talpha_r\tbeta\tproduct\n"));
}

#[test]
fn defaults_without_flags() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("corpus.jsonl");
    write_raw_corpus(&raw, 4);
    let data = dir.path().join("data");
    ok(&[
        "prep",
        "--input",
        s(&raw),
        "--out",
        s(&data),
        "--split",
        "2,1,1",
    ]);
    let mut config = TrainConfig {
        hidden: 1,
        ..TrainConfig::default()
    };
    config
        .apply_kv(&fs::read_to_string(data.join("config.effective")).unwrap())
        .unwrap();
    assert_eq!(config, TrainConfig::default());
}

#[test]
fn eval_requires_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = ctrsgen(&["eval", "--input", "missing.jsonl", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn missing_checkpoint_file_fails_without_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report");
    let out = ctrsgen(&[
        "eval",
        "--checkpoint",
        s(&dir.path().join("none.ckpt")),
        "--input",
        "x.jsonl",
        "--out",
        s(&report),
    ]);
    assert!(!out.status.success());
    assert!(!report.exists());
}

#[test]
fn unknown_flag_fails() {
    assert!(
        !ctrsgen(&["train", "--data", "d", "--out", "o", "--bogus", "1"])
            .status
            .success()
    );
    assert!(!ctrsgen(&["frobnicate"]).status.success());
}

#[test]
fn grad_check_passes() {
    let out = ok(&["grad-check"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() > 20);
    assert!(!text.contains("FAIL"));
}
