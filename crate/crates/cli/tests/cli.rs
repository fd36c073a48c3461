use std::path::Path;
use std::process::{Command, Output};

fn resprop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_resprop")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

/// Rows of a CSV file as string fields, header included.
fn rows(path: &Path) -> Vec<Vec<String>> {
    read(path).lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

fn column(table: &[Vec<String>], name: &str) -> Vec<String> {
    let i = table[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    table[1..].iter().map(|r| r[i].clone()).collect()
}

fn floats(v: &[String]) -> Vec<f64> {
    v.iter().map(|s| s.parse().unwrap()).collect()
}

#[test]
fn analyze_unnormalized_linear_writes_doubling_prediction() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = resprop(&["analyze", "--family", "fc-linear", "--normalized", "false", "--depth", "25", "--width", "64", "--batch", "64", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stats = rows(&dir.path().join("stats.csv"));
    assert_eq!(stats.len(), 26);
    let predicted = floats(&column(&stats, "predicted_skip_var"));
    for (l, p) in predicted.iter().enumerate() {
        assert_eq!(*p, 2f64.powi(l as i32));
    }
    let prediction = rows(&dir.path().join("prediction.csv"));
    assert_eq!(prediction[0], ["block", "skip_var", "branch_var", "bn_moving_var", "bn_moving_mean_sq"]);
}

#[test]
fn analyze_relu_carries_bn_prediction_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = resprop(&["analyze", "--family", "fc-relu", "--depth", "25", "--width", "32", "--batch", "64", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stats = rows(&dir.path().join("stats.csv"));
    let var = floats(&column(&stats, "predicted_bn_moving_var"));
    let mean_sq = floats(&column(&stats, "predicted_bn_moving_mean_sq"));
    let pi = std::f64::consts::PI;
    for l in 1..=25 {
        assert!((var[l - 1] - l as f64 * (1.0 - 1.0 / pi)).abs() < 1e-12);
        assert!((mean_sq[l - 1] - l as f64 / pi).abs() < 1e-12);
    }
    assert!(column(&stats, "bn_moving_var").iter().all(|v| !v.is_empty()));
}

#[test]
fn missing_required_flag_is_a_validation_error() {
    let o = resprop(&["analyze", "--depth", "3"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("family"));
    assert_eq!(code(&resprop(&["analyze", "--family", "fc-relu", "--depth", "x"])), 1);
    assert_eq!(code(&resprop(&["train", "--family", "fc-relu", "--depth", "2"])), 1);
}

#[test]
fn zero_learning_rate_gives_flat_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = resprop(&["train", "--family", "fc-relu", "--variant", "skipinit(0)", "--depth", "4", "--width", "16", "--lr", "0", "--epochs", "3", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let run = rows(&dir.path().join("run.csv"));
    let losses = column(&run, "train_loss");
    assert_eq!(losses.len(), 4);
    assert!(losses.iter().all(|l| *l == losses[0]));
}

#[test]
fn seeded_training_reruns_are_byte_identical_and_learn() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = |out: &str| {
        vec![
            "train".to_string(), "--family".into(), "fc-relu".into(), "--variant".into(), "skipinit(0)".into(),
            "--depth".into(), "32".into(), "--width".into(), "32".into(), "--lr".into(), "0.01".into(),
            "--epochs".into(), "3".into(), "--seed".into(), "9".into(), "--out".into(), out.into(),
        ]
    };
    for dir in [&a, &b] {
        let args = args(dir.path().to_str().unwrap());
        let o = resprop(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let run_a = read(&a.path().join("run.csv"));
    assert_eq!(run_a, read(&b.path().join("run.csv")));
    let losses = floats(&column(&rows(&a.path().join("run.csv")), "train_loss"));
    assert!(losses.last().unwrap() < &losses[0]);
}

#[test]
fn diverged_training_still_exits_zero_with_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = resprop(&["train", "--family", "fc-relu", "--variant", "no-norm", "--depth", "8", "--width", "16", "--lr", "1000000", "--epochs", "2", "--out", out]);
    assert_eq!(code(&o), 0);
    let run = rows(&dir.path().join("run.csv"));
    assert_eq!(column(&run, "diverged").last().unwrap(), "true");
}

fn sweep_args<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec![
        cmd, "--family", "fc-relu", "--width", "8", "--epochs", "2", "--runs", "2", "--keep", "1",
        "--lr-min-exp", "-4", "--lr-max-exp", "-2", "--out", out,
    ];
    v.extend_from_slice(extra);
    v
}

#[test]
fn depth_sweep_writes_table_shaped_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = resprop(&sweep_args("sweep-depth", out, &["--depths", "8,64", "--variants", "skipinit(0),skipinit(1)"]));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = rows(&dir.path().join("summary.csv"));
    assert_eq!(summary.len(), 5);
    assert_eq!(column(&summary, "variant"), ["skipinit(0)", "skipinit(0)", "skipinit(1)", "skipinit(1)"]);
    assert_eq!(column(&summary, "depth"), ["8", "64", "8", "64"]);
    assert!(column(&summary, "on_boundary").iter().all(|b| b == "true" || b == "false"));
    let runs = rows(&dir.path().join("runs.csv"));
    assert_eq!(runs.len(), 1 + 4 * 3 * 2);
    let grid = rows(&dir.path().join("grid.csv"));
    assert_eq!(grid.len(), 1 + 4 * 3);
}

#[test]
fn ghost_equal_to_batch_matches_full_batch() {
    let ghost = tempfile::tempdir().unwrap();
    let full = tempfile::tempdir().unwrap();
    let common = ["--depth", "3", "--variants", "bn-branch", "--batch-sizes", "8"];
    let mut a = sweep_args("sweep-batch", ghost.path().to_str().unwrap(), &common);
    a.extend(["--ghost", "8"]);
    let mut b = sweep_args("sweep-batch", full.path().to_str().unwrap(), &common);
    b.extend(["--ghost", "full"]);
    assert_eq!(code(&resprop(&a)), 0);
    assert_eq!(code(&resprop(&b)), 0);
    let strip = |p: &Path| {
        let t = rows(p);
        let g = t[0].iter().position(|h| h == "ghost").unwrap();
        t.into_iter().map(|mut r| { r.remove(g); r }).collect::<Vec<_>>()
    };
    assert_eq!(strip(&ghost.path().join("grid.csv")), strip(&full.path().join("grid.csv")));
    assert_eq!(strip(&ghost.path().join("runs.csv")), strip(&full.path().join("runs.csv")));
}

#[test]
fn empty_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = resprop(&["sweep-depth", "--family", "fc-relu", "--depths", "2", "--lr-min-exp", "0", "--lr-max-exp", "-1", "--out", out]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("empty learning-rate grid"));
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let ok = resprop(&["gradcheck", "--out", out]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let stdout = String::from_utf8_lossy(&ok.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("SKIP") && l.contains("batch")));
    let table = rows(&dir.path().join("gradcheck.csv"));
    assert!(column(&table, "status").iter().all(|s| s == "passed" || s == "skipped"));
    let bad = resprop(&["gradcheck", "--corrupt"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL corrupted"));
    assert_eq!(code(&resprop(&["gradcheck", "--precision", "f32"])), 1);
}

#[test]
fn config_file_is_merged_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, r#"{"command": "analyze", "family": "fc-linear", "depth": 3, "width": 16, "batch": 32, "normalized": false}"#).unwrap();
    let out = dir.path().join("out");
    let o = resprop(&["analyze", "--config", cfg.to_str().unwrap(), "--depth", "4", "--precision", "f64", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(rows(&out.join("stats.csv")).len(), 5);
    let written: serde_json::Value = serde_json::from_str(&read(&out.join("config.json"))).unwrap();
    assert_eq!(written["depth"], 4);
    assert_eq!(written["width"], 16);
    assert_eq!(written["precision"], "f64");

    std::fs::write(&cfg, r#"{"family": "fc-linear", "dpeth": 3}"#).unwrap();
    assert_eq!(code(&resprop(&["analyze", "--config", cfg.to_str().unwrap()])), 1);
    std::fs::write(&cfg, r#"{"command": "train"}"#).unwrap();
    assert_eq!(code(&resprop(&["analyze", "--config", cfg.to_str().unwrap(), "--family", "fc-relu", "--depth", "2"])), 1);
}
