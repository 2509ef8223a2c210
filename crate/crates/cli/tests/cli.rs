use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn phaseforge(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phaseforge"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn unreadable_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = phaseforge(&["phantom", "--config", "/nonexistent/cfg.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot read config"));
}

#[test]
fn invalid_config_values_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[dataset]\nsize = 0\n").unwrap();
    let o = phaseforge(&["phantom", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
    std::fs::write(&cfg, "[dataset]\nunknown_key = 1\n").unwrap();
    let o = phaseforge(&["phantom", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_without_artifacts_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let o = phaseforge(&["evaluate", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_phaseforge")).arg("bogus").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stages_run_in_order_and_seed_override_changes_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("run");
    for stage in ["phantom", "train-sbdm", "synthesize", "train-recon", "evaluate"] {
        let o = phaseforge(&[stage, "--config", cfg], &out);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(!stdout(&o).is_empty());
    }
    let csv = std::fs::read_to_string(out.join("reports/metrics.csv")).unwrap();
    assert!(csv.starts_with("method,phase_source,R,n_acs,R_eff,metric,mean,std,n\n"));
    for method in ["zero_filled,none", "varnet,gt", "varnet,sbdm", "varnet,smooth"] {
        assert!(csv.contains(method), "{method} missing");
    }
    assert!(out.join("reports/fid.json").exists());
    assert!(out.join("reports/plots/nrmse.png").exists());

    let other = dir.path().join("other");
    let o = phaseforge(&["phantom", "--config", cfg, "--seed", "7"], &other);
    assert!(o.status.success());
    let a = std::fs::read(out.join("dataset/records/000000.magnitude.bin")).unwrap();
    let b = std::fs::read(other.join("dataset/records/000000.magnitude.bin")).unwrap();
    assert_ne!(a, b);
}
