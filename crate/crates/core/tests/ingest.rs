use std::path::{Path, PathBuf};

use privsched_core::config::{load_config, load_historical_load_csv, preset, InstanceFile, ReferenceFile};
use privsched_core::model::LoadReferenceSource;
use privsched_core::Error;

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

#[test]
fn eco_style_day_mean() {
    // Sum of the 24 hourly values is 7666.6 W; computed with exact decimals
    // outside this crate.
    let mean = load_historical_load_csv(&data("eco_day.csv")).unwrap();
    assert!((mean - 319.441_666_666_666_67).abs() < 1e-9, "{mean}");
}

#[test]
fn historical_reference_feeds_the_policy() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::copy(data("eco_day.csv"), dir.path().join("eco_day.csv")).unwrap();
    let mut f = preset("section-iv-a").unwrap();
    f.privacy.reference = ReferenceFile::HistoricalCsv("eco_day.csv".into());
    let path = dir.path().join("instance.json");
    std::fs::write(&path, serde_json::to_string_pretty(&f).unwrap()).unwrap();
    let cfg = load_config(path.to_str().unwrap()).unwrap();
    assert_eq!(cfg.instance.policy.l_bar_source, LoadReferenceSource::HistoricalMean);
    assert!((cfg.instance.policy.l_bar_w - 319.441_666_666_666_67).abs() < 1e-9);
}

#[test]
fn missing_files_are_io_errors() {
    let err = load_config("/nonexistent/instance.json").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert_eq!(err.exit_code(), 2);
    let err = load_historical_load_csv(Path::new("/nonexistent.csv")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
}

#[test]
fn invariant_breaches_name_the_field() {
    let base = preset("section-iv-a").unwrap();
    let check = |edit: &dyn Fn(&mut InstanceFile), pointer: &str| {
        let mut f = base.clone();
        edit(&mut f);
        match f.validate(Path::new(".")) {
            Err(Error::Config { path, .. }) => assert!(path.starts_with(pointer), "{path} vs {pointer}"),
            other => panic!("expected config error at {pointer}, got {other:?}"),
        }
    };
    check(&|f| f.battery.initial = 10_000.0, "/battery");
    check(&|f| f.battery.capacity = 755.0, "/battery");
    check(&|f| f.privacy.lambda = -1.0, "/privacy/lambda");
    check(&|f| f.schedulable[0].power = 0.0, "/schedulable");
    check(&|f| f.non_schedulable[0].zone = [11, 14], "/non_schedulable");
    check(&|f| f.schedulable[1].id = "app1".into(), "/schedulable");
    check(
        &|f| f.price = privsched_core::config::PriceFile::Values(vec![0.1; 11]),
        "/price",
    );
}

#[test]
fn malformed_json_reports_a_pointer() {
    let text = serde_json::to_string(&preset("motivating-example").unwrap())
        .unwrap()
        .replace("\"runtime_slots\":2", "\"runtime_slots\":-2");
    match InstanceFile::from_json(&text) {
        Err(Error::Config { path, .. }) => assert_eq!(path, "/non_schedulable/0/runtime_slots"),
        other => panic!("{other:?}"),
    }
}
