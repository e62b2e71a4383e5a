use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn srma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srma")).args(args).output().expect("spawn srma")
}

fn ok(args: &[&str]) -> String {
    let out = srma(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 8] = [
    "--set",
    "synth.users=120",
    "--set",
    "synth.items=100",
    "--set",
    "encoder.dim=16",
    "--set",
    "data.maxlen=10",
];

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL).collect()
}

/// synth + prepare into `dir/data`.
fn prepare(dir: &Path) -> std::path::PathBuf {
    let raw = dir.join("raw/log.tsv");
    let data = dir.join("data");
    ok(&with_small(&["synth", "--out", p(&raw)]));
    ok(&with_small(&["prepare", "--input", p(&raw), "--out", p(&data)]));
    data
}

#[test]
fn one_epoch_pipeline_emits_one_record() {
    let dir = TempDir::new().unwrap();
    let data = prepare(dir.path());
    let run = dir.path().join("run");
    let stdout = ok(&with_small(&["train", "--data", p(&data), "--out", p(&run), "--set", "train.epochs=1"]));
    assert!(stdout.contains("NDCG@10"));
    let jsonl = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 1);
    let rec: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(rec["epoch"], 1);
    assert_eq!(rec["split"], "valid");
    for f in ["config.txt", "best.ckpt", "state.ckpt", "state.json", "test_metrics.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    // the echoed config reproduces the run
    let again = dir.path().join("again");
    let cfg = run.join("config.txt");
    ok(&["train", "--data", p(&data), "--out", p(&again), "--config", p(&cfg)]);
    assert_eq!(fs::read(run.join("metrics.jsonl")).unwrap(), fs::read(again.join("metrics.jsonl")).unwrap());

    // rerunning into the same directory does not append
    ok(&["train", "--data", p(&data), "--out", p(&again), "--config", p(&cfg)]);
    assert_eq!(fs::read_to_string(again.join("metrics.jsonl")).unwrap(), jsonl);

    let table = ok(&["evaluate", "--data", p(&data), "--checkpoint", p(&run.join("best.ckpt"))]);
    let test: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("test_metrics.json")).unwrap()).unwrap();
    let ndcg10: f64 = table.lines().nth(1).unwrap().split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!((ndcg10 - test["ndcg10"].as_f64().unwrap()).abs() < 5e-5);
}

#[test]
fn resume_continues_to_the_new_budget() {
    let dir = TempDir::new().unwrap();
    let data = prepare(dir.path());
    let (full, split) = (dir.path().join("full"), dir.path().join("split"));
    ok(&with_small(&["train", "--data", p(&data), "--out", p(&full), "--set", "train.epochs=3"]));
    ok(&with_small(&["train", "--data", p(&data), "--out", p(&split), "--set", "train.epochs=2"]));
    ok(&with_small(&["train", "--data", p(&data), "--out", p(&split), "--set", "train.epochs=3", "--resume"]));
    assert_eq!(fs::read(full.join("metrics.jsonl")).unwrap(), fs::read(split.join("metrics.jsonl")).unwrap());
}

#[test]
fn untrained_model_is_near_random() {
    let dir = TempDir::new().unwrap();
    let data = prepare(dir.path());
    let table = ok(&with_small(&["evaluate", "--data", p(&data), "--split", "valid"]));
    let row: Vec<f64> = table.lines().nth(1).unwrap().split_whitespace().map(|v| v.parse().unwrap()).collect();
    // roughly 85 eligible candidates per user, so random HR@10 is near 0.12
    assert!(row[1] > 0.02 && row[1] < 0.3, "HR@10 {}", row[1]);
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = TempDir::new().unwrap();
    let x = dir.path().join("x.tsv");
    let cases: [&[&str]; 4] = [
        &["prepare", "--input", "/nonexistent/log.tsv", "--out", p(dir.path())],
        &["synth", "--out", p(&x), "--set", "no.such=1"],
        &["synth", "--out", p(&x), "--set", "modelaug.p=1.5"],
        &["evaluate", "--data", p(dir.path())],
    ];
    for args in cases {
        let out = srma(args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{err}");
        assert!(err.starts_with("error: "), "{err}");
    }
}

#[test]
fn gradcheck_reports_pass() {
    let out = ok(&["gradcheck", "--cases", "20", "--composed-cases", "2"]);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("PASS max_rel_err="), "{last}");
}

#[test]
fn ablation_grid_row_counts() {
    let dir = TempDir::new().unwrap();
    let data = prepare(dir.path());
    let out = dir.path().join("ablate");
    let quick = ["--set", "train.epochs=1", "--set", "train.complement_epochs=1"];
    for (axis, rows) in [("p", 10), ("K_M", 10), ("gamma", 6), ("components", 4)] {
        let mut args = with_small(&["ablate", "--axis", axis, "--data", p(&data), "--out", p(&out)]);
        args.extend(quick);
        ok(&args);
        let csv = fs::read_to_string(out.join(format!("{axis}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), rows + 1, "{axis}");
        for line in csv.lines().skip(1) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 8);
            assert!(cells[2..].iter().all(|c| c.split('.').nth(1).map(str::len) == Some(4)), "{line}");
        }
        let runs = fs::read_to_string(out.join(format!("{axis}_runs.csv"))).unwrap();
        assert_eq!(runs.lines().count(), rows + 1);
    }
    assert!(out.join("config.txt").exists());
}
