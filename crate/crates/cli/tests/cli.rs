use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const FAST: &str =
    "[train]\ninner_folds = 3\nrho3_grid = [0.2, 0.8]\n\n[train.lambda_grid.Auto]\nn = 15\nmin_ratio = 1e-3\n";

fn mctrace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mctrace")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
    model: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus");
        let o = mctrace(&[
            "synth",
            "-o",
            s(&corpus),
            "--per-class",
            "15",
            "--length",
            "3000",
            "--seed",
            "5",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        let cfg = dir.path().join("fast.toml");
        std::fs::write(&cfg, FAST).unwrap();
        let model = dir.path().join("model.json");
        let o = mctrace(&[
            "train",
            "--manifest",
            s(&corpus.join("manifest.txt")),
            "-o",
            s(&model),
            "--config",
            s(&cfg),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Fixture { dir, model }
    }

    fn trace(&self, i: usize) -> PathBuf {
        self.dir.path().join("corpus/traces").join(format!("prog_{i:05}.trace"))
    }
}

#[test]
fn classify_gate_exit_codes() {
    let f = Fixture::new();
    let benign = f.trace(0);
    let malicious = f.trace(20);

    let o = mctrace(&["classify", "--model", s(&f.model), "--gate", s(&benign)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line: Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(line["malicious"], false);
    assert_eq!(line["instructions"], 3000);

    let o = mctrace(&["classify", "--model", s(&f.model), "--gate", s(&benign), s(&malicious)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).lines().count(), 2);

    // Without the gate a detection is still a successful run.
    let o = mctrace(&["classify", "--model", s(&f.model), s(&malicious)]);
    assert_eq!(o.status.code(), Some(0));

    // tau = 1 can never be exceeded.
    let o = mctrace(&[
        "classify",
        "--model",
        s(&f.model),
        "--gate",
        "--tau",
        "1",
        s(&malicious),
    ]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn monitor_streams_json_lines_from_stdin() {
    let f = Fixture::new();
    let trace = std::fs::read(f.trace(20)).unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_mctrace"))
        .args([
            "monitor",
            "--model",
            s(&f.model),
            "--cadence",
            "700",
            "--draws",
            "200",
            "--seed",
            "3",
        ])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        use std::io::Write;
        child.stdin.take().unwrap().write_all(&trace).unwrap();
    }
    let o = child.wait_with_output().unwrap();
    assert!(o.status.success());
    let recs: Vec<Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // Four cadence checkpoints plus the final partial one at 3000.
    let ms: Vec<u64> = recs.iter().map(|r| r["m"].as_u64().unwrap()).collect();
    assert_eq!(ms, [700, 1400, 2100, 2800, 3000]);
    for r in &recs {
        let (lo, mean, hi) = (
            r["ci_low"].as_f64().unwrap(),
            r["mean_prob"].as_f64().unwrap(),
            r["ci_high"].as_f64().unwrap(),
        );
        assert!(lo <= mean && mean <= hi);
        assert!(["malicious", "benign", "undecided"].contains(&r["decision"].as_str().unwrap()));
    }

    // Same input from a file gives the same output.
    let o2 = mctrace(&[
        "monitor",
        "--model",
        s(&f.model),
        "--input",
        s(&f.trace(20)),
        "--cadence",
        "700",
        "--draws",
        "200",
        "--seed",
        "3",
    ]);
    assert_eq!(o.stdout, o2.stdout);
}

#[test]
fn monitor_config_file_and_flag_override() {
    let f = Fixture::new();
    let cfg = f.dir.path().join("mon.toml");
    std::fs::write(&cfg, "[monitor]\ncadence = 1000\ndraws = 100\nci_width_max = 0.5\n").unwrap();
    let trace = f.trace(3);
    let base = [
        "monitor",
        "--model",
        s(&f.model),
        "--input",
        s(&trace),
        "--config",
        s(&cfg),
    ];
    let o = mctrace(&base);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(stdout(&o).lines().count(), 3);
    let mut args = base.to_vec();
    args.extend(["--cadence", "1500"]);
    let o = mctrace(&args);
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn inspect_and_roc() {
    let f = Fixture::new();
    let o = mctrace(&["inspect-model", "--model", s(&f.model)]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["num_categories"], 8);
    assert_eq!(v["n_train"], 30);

    let scores = f.dir.path().join("scores.txt");
    std::fs::write(&scores, "# score label\n0.9 1\n0.8 1\n0.3 0\n0.7 0\n").unwrap();
    let csv = f.dir.path().join("roc.csv");
    let o = mctrace(&["roc", "--scores", s(&scores), "--csv", s(&csv)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["auc"], 1.0);
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() >= 2);
}

#[test]
fn errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");

    let o = mctrace(&["classify", "--model", s(&missing), "x.trace"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error: loading model"), "{}", stderr(&o));

    let o = mctrace(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let o = mctrace(&["--help"]);
    assert_eq!(o.status.code(), Some(0));

    let scores = dir.path().join("bad.txt");
    std::fs::write(&scores, "0.5 1\n0.2 maybe\n").unwrap();
    let o = mctrace(&["roc", "--scores", s(&scores)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = mctrace(&["synth", "-o", s(&dir.path().join("c")), "--rows", "9"]);
    assert_eq!(o.status.code(), Some(2));

    let manifest = dir.path().join("m.txt");
    std::fs::write(&manifest, "a.trace 1\n").unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nno_such_key = 1\n").unwrap();
    let o = mctrace(&[
        "train",
        "--manifest",
        s(&manifest),
        "-o",
        s(&missing),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("parsing config"), "{}", stderr(&o));

    let o = mctrace(&[
        "train",
        "--manifest",
        s(&manifest),
        "-o",
        s(&missing),
        "--criterion",
        "vibes",
    ]);
    assert_eq!(o.status.code(), Some(2));
}
