use std::path::Path;
use std::process::{Command, Output};

use privsched_core::config::preset;

fn privsched(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_privsched")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_preset(dir: &Path, name: &str, edit: impl FnOnce(&mut serde_json::Value)) -> String {
    let mut v = serde_json::to_value(preset(name).unwrap()).unwrap();
    edit(&mut v);
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn presets_are_listed() {
    let out = privsched(&["presets"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["section-iv-a", "table-ii", "motivating-example"] {
        assert!(text.contains(name));
    }
}

#[test]
fn solve_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out = privsched(&["solve", "--config", "motivating-example", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for f in ["solution.json", "trace.json", "report.csv", "table.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let report = std::fs::read_to_string(run.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 5);
}

#[test]
fn missing_table_exits_2() {
    let out = privsched(&["simulate", "--config", "section-iv-a", "--table", "missing.tbl"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("missing.tbl"));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&privsched(&["frobnicate"])), 2);
    assert_eq!(code(&privsched(&["solve", "--config"])), 2);
    assert_eq!(code(&privsched(&["solve", "--config", "no-such-preset", "--out", "x"])), 2);
}

#[test]
fn unknown_keys_exit_2_with_a_pointer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_preset(dir.path(), "motivating-example", |v| {
        v["privacy"]["lamda"] = serde_json::json!(1);
    });
    let out = privsched(&["solve", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("/privacy/lamda"), "{}", stderr(&out));
}

#[test]
fn unattainable_privacy_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_preset(dir.path(), "motivating-example", |v| {
        v["privacy"]["lambda"] = serde_json::json!(5.0);
    });
    let out = privsched(&["solve", "--config", &cfg, "--out", dir.path().join("r").to_str().unwrap()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("smallest feasible"), "{}", stderr(&out));
}

#[test]
fn stale_and_corrupt_tables_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let table = dir.path().join("t.bin");
    let out = privsched(&[
        "build-table",
        "--config",
        "motivating-example",
        "--out",
        table.to_str().unwrap(),
        "--omega",
        "all",
        "--format",
        "binary",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let ok = privsched(&["simulate", "--config", "motivating-example", "--table", table.to_str().unwrap()]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));

    let cfg = write_preset(dir.path(), "motivating-example", |v| {
        v["price"]["values"][0] = serde_json::json!(0.31);
    });
    let stale = privsched(&["simulate", "--config", &cfg, "--table", table.to_str().unwrap()]);
    assert_eq!(code(&stale), 4, "{}", stderr(&stale));

    let mut bytes = std::fs::read(&table).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&table, bytes).unwrap();
    let corrupt = privsched(&["simulate", "--config", "motivating-example", "--table", table.to_str().unwrap()]);
    assert_eq!(code(&corrupt), 4);
}

#[test]
fn build_table_accepts_a_placement_file() {
    let dir = tempfile::tempdir().unwrap();
    let omega = dir.path().join("omega.json");
    std::fs::write(&omega, r#"[{"starts_ns": [2]}, {"starts_ns": [null]}]"#).unwrap();
    let table = dir.path().join("t.json");
    let out = privsched(&[
        "build-table",
        "--config",
        "motivating-example",
        "--out",
        table.to_str().unwrap(),
        "--omega",
        omega.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    std::fs::write(&omega, r#"[{"starts_ns": [3]}]"#).unwrap();
    let bad = privsched(&[
        "build-table",
        "--config",
        "motivating-example",
        "--out",
        table.to_str().unwrap(),
        "--omega",
        omega.to_str().unwrap(),
    ]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn verify_prints_match() {
    let out = privsched(&["verify", "--seed", "7"]);
    assert_eq!(code(&out), 0);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().last(), Some("MATCH"));
}

#[test]
fn sweep_writes_plot_data() {
    let out = privsched(&["sweep", "--config", "motivating-example", "--capacities", "0,20,40,80"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "capacity_wh,cost");
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 2));
    assert!(stderr(&out).contains("capacity 0 Wh"));
}

#[test]
fn simulate_with_script_and_sample() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    assert_eq!(
        code(&privsched(&["solve", "--config", "motivating-example", "--out", run.to_str().unwrap()])),
        0
    );
    let table = run.join("table.json");
    let script = dir.path().join("script.json");
    std::fs::write(&script, r#"{"events": [{"slot": 2, "appliance": "beta", "action": "start"}]}"#).unwrap();
    let report = dir.path().join("r.csv");
    let out = privsched(&[
        "simulate",
        "--config",
        "motivating-example",
        "--table",
        table.to_str().unwrap(),
        "--script",
        script.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("breaches 0"));
    let a = privsched(&["simulate", "--config", "motivating-example", "--table", table.to_str().unwrap(), "--sample", "9"]);
    let b = privsched(&["simulate", "--config", "motivating-example", "--table", table.to_str().unwrap(), "--sample", "9"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    std::fs::write(&script, r#"{"events": [{"slot": 4, "appliance": "beta", "action": "start"}]}"#).unwrap();
    let bad = privsched(&["simulate", "--config", "motivating-example", "--table", table.to_str().unwrap(), "--script", script.to_str().unwrap()]);
    assert_eq!(code(&bad), 2);
}

#[test]
fn thread_cap_is_validated() {
    let bad = Command::new(env!("CARGO_BIN_EXE_privsched"))
        .env("PACES_THREADS", "zero")
        .arg("presets")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
    let ok = Command::new(env!("CARGO_BIN_EXE_privsched"))
        .env("PACES_THREADS", "2")
        .args(["sweep", "--config", "motivating-example", "--capacities", "20,40"])
        .output()
        .unwrap();
    assert_eq!(code(&ok), 0);
}
