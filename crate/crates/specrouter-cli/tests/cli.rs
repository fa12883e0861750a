use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn specrouter(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specrouter"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn defaults() -> String {
    let out = specrouter(&["defaults"]);
    assert!(out.status.success());
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_config(dir: &Path) -> String {
    let text = defaults().replace("num_requests = 8", "num_requests = 3");
    write_config(dir, "run.toml", &text)
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn defaults_is_a_valid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "d.toml", &defaults());
    let out = dir.path().join("out");
    let status = specrouter(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
}

#[test]
fn run_writes_versioned_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = specrouter(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--trace", "cycles"]);
    assert!(o.status.success());
    assert_eq!(report(&out)["schema_version"], 1);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("schema_version,"));
    assert!(csv.lines().nth(1).unwrap().starts_with("1,"));
    let trace = fs::read_to_string(out.join("trace.jsonl")).unwrap();
    let header: Value = serde_json::from_str(trace.lines().next().unwrap()).unwrap();
    assert_eq!(header["schema_version"], 1);
    assert!(trace.lines().count() > 1);
    assert!(fs::read_to_string(out.join("effective_config.toml")).unwrap().contains("schema_version = 1"));
}

#[test]
fn tmo_config_reports_unit_eaf() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = specrouter(&["run", "--config", &cfg, "--set", "mode.kind=\"tmo\"", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(report(&out)["metrics"]["eaf"], 1.0);
}

#[test]
fn override_matches_file_edit_and_echo_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    assert!(specrouter(&["run", "--config", &cfg, "--set", "workload.seed=7", "--out", a.to_str().unwrap()])
        .status
        .success());

    let edited = fs::read_to_string(&cfg)
        .unwrap()
        .replace("[workload]\n", "[workload]\nseed = 7\n");
    let cfg_b = write_config(dir.path(), "edited.toml", &edited);
    let b = dir.path().join("b");
    assert!(specrouter(&["run", "--config", &cfg_b, "--out", b.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());

    let echo = a.join("effective_config.toml");
    let c = dir.path().join("c");
    assert!(specrouter(&["run", "--config", echo.to_str().unwrap(), "--out", c.to_str().unwrap()])
        .status
        .success());
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(c.join("report.json")).unwrap());
}

#[test]
fn seed_flag_changes_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(specrouter(&["run", "--config", &cfg, "--seed", "1", "--out", a.to_str().unwrap()]).status.success());
    assert!(specrouter(&["run", "--config", &cfg, "--seed", "2", "--out", b.to_str().unwrap()]).status.success());
    assert_eq!(report(&a)["seed"], 1);
    assert_ne!(report(&a)["metrics"], report(&b)["metrics"]);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let no_pool = write_config(dir.path(), "bad.toml", "seed = 1\n");
    let o = specrouter(&["run", "--config", &no_pool]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("pool"));

    let cfg = small_config(dir.path());
    assert_eq!(specrouter(&["run", "--config", &cfg, "--set", "scheduler.nope=1"]).status.code(), Some(2));
    assert_eq!(specrouter(&["run", "--config", &cfg, "--set", "novalue"]).status.code(), Some(2));
    assert_eq!(specrouter(&["run", "--config", "/no/such/file.toml"]).status.code(), Some(2));
    assert_eq!(specrouter(&["run", "--config", &cfg, "--trace", "loud"]).status.code(), Some(2));
    assert_eq!(specrouter(&["bogus"]).status.code(), Some(2));

    let typo = write_config(dir.path(), "typo.toml", "seed = \"x\"\n[pool]\n");
    let o = specrouter(&["run", "--config", &typo]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
}

#[test]
fn length_profile_config_runs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("lengths.txt"), "5 12\n9 20\n").unwrap();
    let text = defaults().replace("num_requests = 8", "num_requests = 3").replace(
        "[workload.output_len]\nkind = \"fixed\"\nn = 64",
        "[workload.output_len]\nkind = \"empirical\"\npath = \"lengths.txt\"",
    );
    assert!(text.contains("empirical"), "defaults layout changed");
    let cfg = write_config(dir.path(), "run.toml", &text);
    let out = dir.path().join("out");
    let o = specrouter(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for r in report(&out)["requests"].as_array().unwrap() {
        let n = r["tokens"][0].as_u64().unwrap();
        assert!(n <= 20);
    }
}

#[test]
fn sweep_writes_cells_and_marks_argmin() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let o = specrouter(&[
        "sweep",
        "--config",
        &cfg,
        "--chain",
        "small>target",
        "--chain",
        "medium>target",
        "--window",
        "2,4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut lines = summary.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);

    // recompute the argmin from the per-cell reports
    let mut best = (f64::INFINITY, usize::MAX);
    for i in 0..4 {
        let r = report(&out.join("cells").join(format!("{i:03}")));
        assert_eq!(r["schema_version"], 1);
        let tpot = r["metrics"]["tpot_mean"].as_f64().unwrap();
        if tpot < best.0 {
            best = (tpot, i);
        }
    }
    for row in &rows {
        let is_best = row[col("is_best")] == "true";
        assert_eq!(is_best, row[col("index")] == best.1.to_string());
    }
}

#[test]
fn empty_sweep_grid_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    assert_eq!(specrouter(&["sweep", "--config", &cfg]).status.code(), Some(2));
    let grid = write_config(dir.path(), "grid.toml", "window = []\n");
    assert_eq!(specrouter(&["sweep", "--config", &cfg, "--grid", &grid]).status.code(), Some(2));
}

#[test]
fn failed_sweep_cells_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let o = specrouter(&[
        "sweep",
        "--config",
        &cfg,
        "--chain",
        "target>small",
        "--chain",
        "small>target",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(out.join("cells/000/error.txt").exists());
    assert!(out.join("cells/001/report.json").exists());
}

#[test]
fn validate_exit_codes() {
    let ok = specrouter(&["validate", "--check", "acceptance-rate"]);
    assert!(ok.status.success());
    assert!(String::from_utf8_lossy(&ok.stdout).contains("PASS"));

    let bad = specrouter(&["validate", "--check", "acceptance-rate", "--corrupt-acceptance"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("acceptance_rate"));

    let dir = tempfile::tempdir().unwrap();
    let tight = specrouter(&[
        "validate",
        "--check",
        "acceptance-rate",
        "--tol-scale",
        "0",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(tight.status.code(), Some(1));
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("validation.json")).unwrap()).unwrap();
    assert_eq!(v["schema_version"], 1);
}
