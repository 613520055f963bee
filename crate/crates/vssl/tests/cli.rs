mod common;

use std::process::Command;

fn vssl(work: &std::path::Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_vssl")).env("VSSL_WORK_DIR", work).args(args).output().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, common::TINY).unwrap();
    let c = cfg.to_str().unwrap();

    let ok = vssl(dir.path(), &["pretrain", "-c", c, "--pretext", "odd"]);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let printed = String::from_utf8(ok.stdout).unwrap();
    assert!(printed.trim().ends_with("pretrain.json"));

    let bad_alpha = vssl(dir.path(), &["eval", "-c", c, "--alpha", "1.5"]);
    assert_eq!(bad_alpha.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad_alpha.stderr).contains("alpha"));

    let bad_flag = vssl(dir.path(), &["eval", "--no-such-flag"]);
    assert_eq!(bad_flag.status.code(), Some(2));

    std::fs::write(&cfg, "n_runs = 0\n").unwrap();
    assert_eq!(vssl(dir.path(), &["eval", "-c", c]).status.code(), Some(2));

    let missing = dir.path().join("absent.jsonl");
    let runtime = vssl(dir.path(), &["eval", "--manifest", missing.to_str().unwrap()]);
    assert_eq!(runtime.status.code(), Some(3));

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(vssl(&empty.path().join("nothing"), &["report"]).status.code(), Some(3));
}

#[test]
fn work_dir_flag_beats_environment() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let cfg = flag_dir.path().join("tiny.toml");
    std::fs::write(&cfg, common::TINY).unwrap();
    let out = vssl(
        env_dir.path(),
        &["pretrain", "-c", cfg.to_str().unwrap(), "--pretext", "none", "--work-dir", flag_dir.path().to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(0));
    assert!(flag_dir.path().join("reports/pretrain.json").exists());
    assert!(!env_dir.path().join("reports").exists());
}
