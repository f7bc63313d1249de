use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ackf-dse")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn data_lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p).unwrap().lines().filter(|l| !l.starts_with('#')).map(str::to_owned).collect()
}

fn generate(dir: &Path) {
    let d = dir.to_str().unwrap();
    ok(&["generate", "--out", d, "--feeder", "layered", "--buses", "50", "--T", "120", "--seed", "3"]);
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate(&a);
    generate(&b);
    for f in ["network.json", "partition.json", "plan.json", "truth.csv", "pseudo.csv", "meters.csv", "scenario.json"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    let est = |bundle: &Path, out: &Path, extra: &[&str]| {
        let mut args = vec!["estimate", "--bundle", bundle.to_str().unwrap(), "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&args);
    };
    let e: Vec<_> = (0..4).map(|k| tmp.path().join(format!("e{k}.csv"))).collect();
    est(&a, &e[0], &[]);
    est(&a, &e[1], &[]);
    est(&b, &e[2], &[]);
    est(&a, &e[3], &["--sequential"]);
    assert_eq!(read(&e[0]), read(&e[1]));
    // headers record the input paths and the parallel flag
    assert_eq!(data_lines(&e[0]), data_lines(&e[2]));
    assert_eq!(data_lines(&e[0]), data_lines(&e[3]));
}

#[test]
fn files_carry_version_and_config() {
    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("s");
    generate(&bundle);
    for f in ["network.json", "partition.json", "plan.json"] {
        let v: serde_json::Value = serde_json::from_slice(&read(&bundle.join(f))).unwrap();
        assert_eq!(v["format_version"], 1, "{f}");
        assert!(v["config"].is_object(), "{f}");
    }
    let first = std::fs::read_to_string(bundle.join("meters.csv")).unwrap();
    assert!(first.starts_with("# format_version: 1\n# config: {"));

    let b = bundle.to_str().unwrap();
    let report = tmp.path().join("cmp.json");
    ok(&["compare", "--bundle", b, "--out", report.to_str().unwrap(), "--estimator", "ackf-single"]);
    let v: serde_json::Value = serde_json::from_slice(&read(&report)).unwrap();
    assert_eq!(v["format_version"], 1);
    assert!(v["config"].is_object());
    assert_eq!(v["reports"].as_array().unwrap().len(), 2);

    let table = tmp.path().join("bench.txt");
    ok(&["bench", "--bundle", b, "--out", table.to_str().unwrap(), "--format", "table", "--repetitions", "1", "--estimators", "ackf-multilayer,wls"]);
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.contains("ackf-multilayer") && text.contains("wls"));

    let csv = tmp.path().join("cmp.csv");
    ok(&["export", "--report", report.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert!(data_lines(&csv).len() > 2);

    let est = tmp.path().join("est.csv");
    ok(&["estimate", "--bundle", b, "--out", est.to_str().unwrap(), "--estimator", "wls"]);
    let steps = tmp.path().join("steps.csv");
    ok(&["export", "--estimates", est.to_str().unwrap(), "--bundle", b, "--out", steps.to_str().unwrap()]);
    // header plus one row per sample and bus
    assert_eq!(data_lines(&steps).len(), 1 + 120 * 49);
}

#[test]
fn exit_codes() {
    assert_eq!(cli(&["estimate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(cli(&["generate", "--out", "/tmp/x", "--pv-penetration", "1.5"]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let bundle = tmp.path().join("s");
    generate(&bundle);
    std::fs::write(bundle.join("network.json"), "{ not json").unwrap();
    let out = tmp.path().join("e.csv");
    let code = cli(&["estimate", "--bundle", bundle.to_str().unwrap(), "--out", out.to_str().unwrap()]).status.code();
    assert_eq!(code, Some(3));
}
