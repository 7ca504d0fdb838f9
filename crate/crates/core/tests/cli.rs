use std::path::Path;
use std::process::Command;
use xva_core::report::ValuationReport;

const BIN: &str = env!("CARGO_BIN_EXE_xva");

fn scenario(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name).display().to_string()
}

fn xva(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

#[test]
fn writes_reports_that_reparse() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = xva(&["--scenario", &scenario("linear_call.json"), "--paths", "4000", "--steps", "16", "--out", out, "--format", "both"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let json = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let report: ValuationReport = serde_json::from_str(&json).unwrap();
    assert_eq!(report.metadata.paths, 4000);
    assert!(std::fs::read_to_string(dir.path().join("report.csv")).unwrap().starts_with("term,mean,se\n"));
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_meta.json")).unwrap()).unwrap();
    assert!(meta["elapsed_seconds"].is_number());
}

#[test]
fn reports_are_reproducible_across_thread_counts() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (d, threads) in dirs.iter().zip(["1", "3"]) {
        let out = d.path().to_str().unwrap();
        let o = Command::new(BIN)
            .args(["--scenario", &scenario("nonlinear_call.json"), "--paths", "3000", "--steps", "8", "--out", out])
            .env("XVA_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("report.json")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(xva(&["--scenario", &scenario("linear_call.json"), "--mode", "fast"]).status.code(), Some(2));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 1, "market": {"horizon": 1, "r": "x"}}"#).unwrap();
    let o = xva(&["--scenario", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("market.r"));

    let text = std::fs::read_to_string(scenario("nonlinear_call.json")).unwrap();
    let mut s: serde_json::Value = serde_json::from_str(&text).unwrap();
    s["run"]["solver"] = "picard".into();
    s["run"]["max_iterations"] = 1.into();
    let stalled = dir.path().join("stalled.json");
    std::fs::write(&stalled, s.to_string()).unwrap();
    let out = dir.path().to_str().unwrap();
    let o = xva(&["--scenario", stalled.to_str().unwrap(), "--paths", "2000", "--steps", "8", "--out", out]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn degenerate_scenario_has_no_adjustments() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("linear_call.json")).unwrap();
    let mut s: serde_json::Value = serde_json::from_str(&text).unwrap();
    for key in ["funding", "collateral", "repo"] {
        s["market"].as_object_mut().unwrap().remove(key);
    }
    s["closeout"] = "null".into();
    let path = dir.path().join("flat.json");
    std::fs::write(&path, s.to_string()).unwrap();
    let out = dir.path().to_str().unwrap();
    let o = xva(&["--scenario", path.to_str().unwrap(), "--paths", "4000", "--steps", "16", "--out", out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: ValuationReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let a = &r.adjustments;
    for e in [a.cva, a.dva, a.lva, a.fva_f].iter().chain(&a.fva_h) {
        assert_eq!(e.mean, 0.0);
    }
}
