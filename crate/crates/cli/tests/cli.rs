use std::process::{Command, Output};

fn aal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_aal")).args(args).output().unwrap()
}

#[test]
fn qr_size_json_is_machine_readable() {
    let out = aal(&["qr-size", "--json", "--poor-lighting", "--not-front-on"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["result"]["k_dis"], 8.0);
    assert!((v["result"]["l_min1_mm"].as_f64().unwrap() - 31.5).abs() < 1e-9);
}

#[test]
fn qr_size_rejects_bad_input() {
    let out = aal(&["qr-size", "--modules-per-side", "30"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not supported"));
}

#[test]
fn devices_virtual_mode_replays_script() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.script");
    std::fs::write(&script, "0 pir 1\n500 set:led 1\n").unwrap();
    let out = aal(&["devices", "--mode", "virtual", "--script", script.to_str().unwrap()]);
    assert!(out.status.success());
    let trace = String::from_utf8(out.stdout).unwrap();
    assert!(trace.contains("[    0.000s] dev-pir: pub home/kitchen/pir \"1\" retained"));
    assert!(trace.contains("[    0.500s] dev-led: pub home/main_entrance/led \"1\" retained"));
}

#[test]
fn devices_refuse_patient_actions() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.script");
    std::fs::write(&script, "0 qr:bedroom_door 400\n").unwrap();
    let out = aal(&["devices", "--mode", "virtual", "--script", script.to_str().unwrap()]);
    assert!(!out.status.success());
}

#[test]
fn scenario_reports_script_errors_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let script = dir.path().join("s.script");
    std::fs::write(&script, "100 pir 1\n50 pir 0\n").unwrap();
    let out = aal(&["scenario", "--script", script.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn bench_rejects_unknown_kind() {
    assert!(!aal(&["bench", "--kind", "video"]).status.success());
}
