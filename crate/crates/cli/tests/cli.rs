use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MINI: &str = r#"
env = "DriftBot"
seed = 0
horizon = 120
t_pre = 300

[ensemble]
epochs = 20

[grid]
po_levels = [0.0, 0.5]
delay_levels = [0, 1]
shifts = []
seeds = [0]

[calibration]
seeds = [1000]
"#;

fn kappa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kappa")).args(args).current_dir(cwd).output().expect("spawn kappa")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path) -> PathBuf {
    let p = dir.join("mini.toml");
    std::fs::write(&p, format!("output_dir = \"{}\"\n{MINI}", dir.join("out").display())).unwrap();
    p
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&kappa(&["frobnicate"], d.path())), 1);
    assert_eq!(code(&kappa(&["oracle-check", "--bogus"], d.path())), 1);
}

#[test]
fn help_exits_zero() {
    let d = tempfile::tempdir().unwrap();
    let o = kappa(&["--help"], d.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["calibrate", "run", "sweep", "analyze", "oracle-check"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}

#[test]
fn oracle_check_zero_samples_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = kappa(&["oracle-check", "--n-samples", "0"], d.path());
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
}

#[test]
fn oracle_check_writes_csv_and_passes() {
    let d = tempfile::tempdir().unwrap();
    let o = kappa(
        &["oracle-check", "--n-samples", "10000", "--seed", "3", "--out", "bound.csv", "--coupling", "coupling.csv"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(d.path().join("bound.csv")).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["seed", "sample", "mi", "bound", "slack", "holds"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 10_000);
    assert!(rows.iter().all(|r| &r[5] == "true"));
    let coupling = std::fs::read_to_string(d.path().join("coupling.csv")).unwrap();
    assert_eq!(coupling.lines().count(), 1 + 3 * 101);
}

#[test]
fn run_without_snapshot_fails_with_diagnostic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());
    let o = kappa(&["run", "--config", cfg.to_str().unwrap(), "--snapshot", "missing.json"], d.path());
    assert_ne!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.json"));
}

#[test]
fn bad_config_key_is_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.toml");
    std::fs::write(&p, "horizn = 10\n").unwrap();
    let o = kappa(&["calibrate", "--config", p.to_str().unwrap()], d.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn tiny_calibration_buffer_is_calibration_error() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("tiny.toml");
    std::fs::write(&p, "t_pre = 10\n").unwrap();
    let o = kappa(&["calibrate", "--config", p.to_str().unwrap(), "--out", "snap.json"], d.path());
    assert_eq!(code(&o), 2);
    assert!(!d.path().join("snap.json").exists());
}

#[test]
fn calibrate_run_sweep_analyze() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());
    let cfg = cfg.to_str().unwrap();

    let o = kappa(&["calibrate", "--config", cfg], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let snap = d.path().join("out/snapshot.json");
    assert!(snap.exists());

    let o = kappa(
        &["run", "--config", cfg, "--po", "0.5", "--tau", "1", "--seed", "2", "--out", "trace.jsonl"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(d.path().join("trace.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 120 + 2);
    assert_eq!(lines[0]["kind"], "header");
    assert_eq!(lines[0]["seed"], 2);
    assert!(lines[0]["config_hash"].as_str().is_some_and(|h| h.len() == 64));
    assert_eq!(lines[1]["kind"], "step");
    assert!(lines[1]["kappa"]["kappa"].is_number());
    assert!(lines[1]["regime"].is_string());
    assert_eq!(lines.last().unwrap()["kind"], "summary");
    assert_eq!(lines.last().unwrap()["label"], "C4");

    let o = kappa(&["run", "--config", cfg, "--shift", "nonsense=1"], d.path());
    assert_eq!(code(&o), 1);

    let o = kappa(&["sweep", "--config", cfg], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = d.path().join("out");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_episodes"], 4);
    assert_eq!(report["budget_violations"], 0);
    let records = std::fs::read_to_string(out.join("records.csv")).unwrap();
    assert!(records.starts_with("# version="));
    let first = std::fs::read(out.join("report.json")).unwrap();

    let o = kappa(&["sweep", "--config", cfg], d.path());
    assert!(String::from_utf8_lossy(&o.stdout).contains("ran=0 resumed=4"));

    std::fs::remove_file(out.join("report.json")).unwrap();
    let o = kappa(&["analyze", "--config", cfg], d.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read(out.join("report.json")).unwrap(), first);
}
