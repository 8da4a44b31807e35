use std::path::Path;
use std::process::{Command, Output};

fn emmental(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emmental")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = emmental(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        ok(&["gen", "--task", "futoshiki", "--count", "4", "--seed", "7", "--out", p(out)]);
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn train_eval_export_solve_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cut.jsonl");
    let model = dir.path().join("model.json");
    let cfn = dir.path().join("net.cfn.json");
    ok(&["gen", "--task", "mincut", "--count", "3", "--seed", "1", "--out", p(&data)]);
    ok(&["train", "--task", "mincut", "--data", p(&data), "--epochs", "1", "--out", p(&model)]);
    let report: serde_json::Value = serde_json::from_str(&ok(&["eval", "--model", p(&model), "--data", p(&data)])).unwrap();
    assert_eq!(report["total"], 3);
    assert!(report["mean_regret"].as_f64().unwrap() >= 0.0);

    ok(&["export", "--model", p(&model), "--data", p(&data), "--index", "2", "--conditioned", "--out", p(&cfn)]);
    let solved = ok(&["solve", "--cfn", p(&cfn)]);
    assert!(solved.contains("status: Optimal"), "{solved}");
    let assignment = solved.lines().find_map(|l| l.strip_prefix("assignment: ")).unwrap();
    assert_eq!(assignment.split(' ').count(), 60);
}

#[test]
fn config_file_fills_missing_flags() {
    let dir = tempfile::tempdir().unwrap();
    let from_flags = dir.path().join("flags.jsonl");
    let from_file = dir.path().join("file.jsonl");
    let config = dir.path().join("gen.toml");
    std::fs::write(&config, "task = \"mincut\"\ncount = 2\nseed = 3\n").unwrap();
    ok(&["gen", "--task", "mincut", "--count", "2", "--seed", "3", "--out", p(&from_flags)]);
    ok(&["gen", "--config", p(&config), "--out", p(&from_file)]);
    assert_eq!(std::fs::read(&from_flags).unwrap(), std::fs::read(&from_file).unwrap());

    // Command-line flags take precedence over the file.
    ok(&["gen", "--config", p(&config), "--count", "1", "--out", p(&from_file)]);
    assert_eq!(std::fs::read_to_string(&from_file).unwrap().lines().count(), 1);

    std::fs::write(&config, "task = \"mincut\"\nbogus = 1\n").unwrap();
    assert!(!emmental(&["gen", "--config", p(&config), "--out", p(&from_file)]).status.success());
}

#[test]
fn failures_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    assert!(!emmental(&["train", "--task", "sudoku", "--data", p(&missing), "--out", "x"]).status.success());
    assert!(!emmental(&["gen", "--count", "1"]).status.success());
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{\"n\": 1, \"domains\": [2], \"top\": -1, \"unary\": [[0, 0]], \"pairwise\": []}").unwrap();
    let out = emmental(&["solve", "--cfn", p(&bad)]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn solve_reports_infeasibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfn = dir.path().join("net.json");
    std::fs::write(
        &cfn,
        r#"{"n": 2, "domains": [2, 2], "top": 10, "unary": [[0, 0], [0, 0]],
            "pairwise": [{"i": 0, "j": 1, "costs": [[10, 10], [10, 10]]}]}"#,
    )
    .unwrap();
    let text = ok(&["solve", "--cfn", p(&cfn)]);
    assert!(text.contains("assignment: none"));
    assert!(text.contains("status: Infeasible"));
}

#[test]
fn dfl_writes_one_row_per_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("curve.csv");
    ok(&["dfl", "--task", "maxcut", "--loss", "spo+", "--epochs", "1", "--seeds", "2", "--out", p(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("samples_seen,mean_test_regret,seed,loss_name"));
    // 100 flipped training samples per epoch, evaluated every 25 plus once
    // before training, for each seed.
    assert_eq!(lines.count(), 2 * 5);
}
