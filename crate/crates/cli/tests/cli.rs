use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_cpp-lab");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn cpp-lab")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    files
}

fn tiny_config(dir: &Path, method: &str, name: &str) -> PathBuf {
    let cfg = serde_json::json!({
        "name": name,
        "method": method,
        "seed": 1,
        "data": {"seed": 3, "train": 10, "val": 5, "image_size": 32, "things": 6, "stuff": 2},
        "schedule": {"base": 2, "increment": 2, "order": [1, 2, 3, 4, 5, 6]},
        "model": {"feature_channels": 8, "embed_dim": 8, "hidden_dim": 8, "num_queries": 8, "max_caption_len": 24},
        "train": {"epochs_per_step": 1},
        "eval": {"beam": 1}
    });
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--seed", "7", "--out", d.to_str().unwrap(), "--n", "4", "--size", "32"]);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(!sa.is_empty());
    assert_eq!(sa, sb);
}

#[test]
fn eval_scores_an_offline_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "offline", "off");
    let out = dir.path().join("out");
    ok(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let data = dir.path().join("data");
    ok(&["synth", "--seed", "11", "--out", data.to_str().unwrap(), "--n", "3", "--size", "32", "--things", "6", "--stuff", "2"]);
    let before = snapshot(&data);
    let ck = out.join("runs/off/step_2/checkpoint");
    let text = ok(&["eval", "--checkpoint", ck.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    let report: cpp_lab::EvalReport = serde_json::from_str(&text).unwrap();
    assert_eq!(report.classes, (1..=8).collect::<Vec<_>>());
    for v in [report.aggregates.all.pq, report.miou, report.bleu.score] {
        assert!((0.0..=1.0).contains(&v), "{v}");
    }
    assert_eq!(before, snapshot(&data), "eval must not modify its input");
}

#[test]
fn report_lists_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "cpp", "inc");
    let out = dir.path().join("out");
    let pseudo = dir.path().join("pseudo");
    ok(&[
        "train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--dump-pseudo", pseudo.to_str().unwrap(),
    ]);
    assert!(pseudo.join("step_1/manifest.json").exists());
    assert!(pseudo.join("step_2/manifest.json").exists());
    let run_dir = out.join("runs/inc");
    let text = ok(&["report", "--run", run_dir.to_str().unwrap()]);
    let record: cpp_lab::RunRecord =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("record.json")).unwrap()).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert_eq!(record.steps.len(), 3);
    let counts: Vec<usize> = record.steps.iter().map(|s| s.report.classes.len()).collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]), "{counts:?}");
    for (row, s) in rows.iter().zip(&record.steps) {
        assert!(row.contains(&format!("{:.2}", 100.0 * s.report.aggregates.all.pq)), "{row}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["synth", "--seed", "1", "--out", "/tmp/x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_is_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cases = [r#"{"train": {"batch_size": 0}}"#, r#"{"name": "#, r#"{"eval": {"beam": 0}}"#];
    for (i, body) in cases.iter().enumerate() {
        let cfg = dir.path().join(format!("bad{i}.json"));
        std::fs::write(&cfg, body).unwrap();
        for sub in ["train", "ablate", "orders"] {
            let r = run(&[sub, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
            assert_eq!(r.status.code(), Some(2), "{sub} {body}");
        }
    }
    assert!(!out.exists());
    let missing = run(&["report", "--run", dir.path().join("nope").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn readme_config_example_is_valid() {
    let readme = include_str!("../../../README.md");
    let start = readme.find("```json\n").expect("json block") + 8;
    let body = &readme[start..start + readme[start..].find("```").unwrap()];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.json");
    std::fs::write(&path, body).unwrap();
    let cfg = cpp_lab::ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.train.base_epochs, Some(25));
}
