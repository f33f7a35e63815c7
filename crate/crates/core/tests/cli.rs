use std::fs;
use std::path::Path;
use std::process::Command;

fn sim(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_sim")).args(args).current_dir(cwd).output().expect("spawn sim")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.json");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn xi_chain_writes_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"params":{"gamma":1.0,"xi0":20,"steps":500,"n_paths":4,"stride":50}}"#);
    let out = dir.path().join("runs");
    let o = sim(&["xi-chain", "--config", &cfg, "--seed", "3", "--out", out.to_str().unwrap()], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let run = out.join("xi_chain_seed3");
    assert!(run.join("manifest.json").is_file());
    let csv = fs::read_to_string(run.join("paths.csv")).unwrap();
    assert!(csv.lines().count() > 4);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("experiment xi_chain"));
}

#[test]
fn same_seed_same_data_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"params":{"gamma":1.0,"xi0":30,"steps":2000,"n_paths":9,"stride":100}}"#);
    let mut csvs = Vec::new();
    for w in ["1", "3"] {
        let out = dir.path().join(format!("w{w}"));
        let o = sim(&["xi-chain", "--config", &cfg, "--workers", w, "--out", out.to_str().unwrap()], dir.path());
        assert!(o.status.success());
        csvs.push(fs::read(out.join("xi_chain_seed0").join("paths.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn unknown_field_is_rejected_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "{\n  \"params\": {\"xi_zero\": 4}\n}");
    let o = sim(&["xi-chain", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn invalid_parameters_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"params":{"gamma":0.3,"xi0":-1}}"#);
    let o = sim(&["aux", "--config", &cfg], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn quick_verify_subset_reports_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"params":{"scale":"quick","criteria":[4,8]}}"#);
    let out = dir.path().join("runs");
    let o = sim(&["verify", "--config", &cfg, "--out", out.to_str().unwrap()], dir.path());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("[PASS]  4") || err.contains("[FAIL]  4"), "{err}");
    assert!(err.contains(" 8 "), "{err}");
    let crit = fs::read_to_string(out.join("verify_seed0").join("criteria.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&crit).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
}
