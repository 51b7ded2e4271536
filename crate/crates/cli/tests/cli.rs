use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn xalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xalign")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = xalign(args);
    assert!(
        out.status.success(),
        "xalign {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Data {
    dir: tempfile::TempDir,
}

impl Data {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        fs::create_dir(&data).unwrap();
        ok(&["synth-data", "--out", s(&data), "--instances", "8"]);
        let d = Data { dir };
        ok(&[
            "gen-descriptions",
            "--manifest",
            s(&d.manifest()),
            "--template",
            "4",
            "--offline-corpus",
            s(&d.path("data/corpus.jsonl")),
            "--out",
            s(&d.descriptions()),
        ]);
        d
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn manifest(&self) -> PathBuf {
        self.path("data/manifest.json")
    }

    fn descriptions(&self) -> PathBuf {
        self.path("descriptions.jsonl")
    }

    fn sets(&self) -> Vec<String> {
        vec![
            "--set".into(),
            format!("data.manifest=\"{}\"", s(&self.manifest())),
            "--set".into(),
            format!("data.descriptions=\"{}\"", s(&self.descriptions())),
        ]
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let mut args: Vec<String> = vec!["train".into(), "--profile".into(), "desk".into()];
        args.extend(self.sets());
        args.extend(["--out".into(), s(&out).into(), "--quiet".into()]);
        args.extend(extra.iter().map(|e| e.to_string()));
        Command::new(env!("CARGO_BIN_EXE_xalign")).args(&args).output().unwrap()
    }
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(xalign(&["no-such-command"]).status.code(), Some(2));
    assert_eq!(xalign(&["synth-data", "--out", "/nonexistent/xalign/dir"]).status.code(), Some(2));
    assert_eq!(xalign(&["gen-descriptions", "--template", "9"]).status.code(), Some(2));
}

#[test]
fn descriptions_cover_seen_categories_and_rerun_identically() {
    let d = Data::new();
    let cache = d.path("cache");
    let run = |out: &str| {
        ok(&[
            "gen-descriptions",
            "--manifest",
            s(&d.manifest()),
            "--template",
            "4",
            "--offline-corpus",
            s(&d.path("data/corpus.jsonl")),
            "--cache",
            s(&cache),
            "--out",
            s(&d.path(out)),
        ]);
        fs::read_to_string(d.path(out)).unwrap()
    };
    let first = run("a.jsonl");
    let second = run("b.jsonl");
    assert_eq!(first, second);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.manifest()).unwrap()).unwrap();
    let unseen: Vec<&str> = manifest["categories"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["seen"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert_eq!(unseen.len(), 2);
    let records: Vec<serde_json::Value> = first.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 4);
    for r in &records {
        assert_eq!(r["template_id"], 4);
        assert!(!unseen.contains(&r["category"].as_str().unwrap()));
    }
}

#[test]
fn smoke_training_finishes_quickly() {
    let d = Data::new();
    let start = Instant::now();
    let out = d.train("smoke", &["--steps", "30"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(start.elapsed() < Duration::from_secs(60));
    let log = fs::read_to_string(d.path("smoke/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 30);
    assert!(d.path("smoke/model.ckpt").is_file());
    assert!(d.path("smoke/config.toml").is_file());
}

#[test]
fn huge_learning_rate_aborts_cleanly() {
    let d = Data::new();
    let out = d.train("diverge", &["--set", "train.lr=1e6", "--steps", "30"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("diverged"), "{err}");
    assert!(err.contains("digest"), "{err}");
    assert!(!err.contains("panicked"), "{err}");
}

#[test]
fn resumed_run_matches_straight_run() {
    let d = Data::new();
    assert!(d.train("straight", &["--steps", "6"]).status.success());
    assert!(d.train("split", &["--steps", "3"]).status.success());
    let ckpt = d.path("split/model.ckpt");
    let resumed = d.train("split", &["--steps", "6", "--resume", s(&ckpt)]);
    assert!(resumed.status.success(), "{}", String::from_utf8_lossy(&resumed.stderr));
    assert_eq!(
        fs::read_to_string(d.path("straight/train.jsonl")).unwrap(),
        fs::read_to_string(d.path("split/train.jsonl")).unwrap()
    );
    assert_eq!(fs::read(d.path("straight/model.ckpt")).unwrap(), fs::read(&ckpt).unwrap());

    let mismatched = d.train("split", &["--steps", "6", "--resume", s(&ckpt), "--set", "train.lr=0.5"]);
    assert_eq!(mismatched.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatched.stderr).contains("digest"));
}

#[test]
fn evaluate_retrieve_and_refuse_foreign_config() {
    let d = Data::new();
    assert!(d.train("run", &["--steps", "2"]).status.success());
    let ckpt = d.path("run/model.ckpt");
    let report = d.path("report.json");
    let csv = d.path("ranks.csv");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&ckpt),
        "--split",
        "unseen",
        "--out",
        s(&report),
        "--oracle",
        "--ranks-csv",
        s(&csv),
    ]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["map_all", "map_200", "prec_100", "prec_200"] {
        let v = r[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{key} {v}");
    }
    assert_eq!(r["config_digest"].as_str().unwrap().len(), 64);
    assert!(fs::read_to_string(&csv).unwrap().lines().count() > 1);

    let mut foreign = vec!["evaluate".to_string(), "--checkpoint".into(), s(&ckpt).into(), "--profile".into(), "desk".into()];
    foreign.extend(d.sets());
    foreign.extend(["--set".into(), "loss.margin=0.9".into(), "--out".into(), s(&d.path("x.json")).into()]);
    let refused = Command::new(env!("CARGO_BIN_EXE_xalign")).args(&foreign).output().unwrap();
    assert_ne!(refused.status.code(), Some(0));
    assert!(!d.path("x.json").exists());

    let sketch = d.path("data/sketches/circle/000.png");
    let manifest = d.manifest();
    let args = [
        "retrieve",
        "--checkpoint",
        s(&ckpt),
        "--sketch",
        s(&sketch),
        "--gallery",
        s(&manifest),
        "--top",
        "10",
    ];
    let table = ok(&args);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    let scores: Vec<f64> = rows.iter().map(|r| r.split_whitespace().last().unwrap().parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    assert!(scores.iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(table, ok(&args));
}

#[test]
fn gradcheck_names_corrupted_op() {
    let clean = xalign(&["gradcheck", "--module", "softmax_rows,matmul"]);
    assert!(clean.status.success());
    let broken = xalign(&["gradcheck", "--module", "softmax_rows,matmul", "--corrupt", "matmul"]);
    assert_eq!(broken.status.code(), Some(1));
    let text = String::from_utf8_lossy(&broken.stdout);
    assert!(text.lines().any(|l| l.starts_with("FAIL matmul")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("PASS softmax_rows")), "{text}");
}
