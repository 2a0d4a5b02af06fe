use std::fs;
use std::process::Command;

use quicstep_lab::harness::read_samples;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quicstep-lab"))
}

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("exp.conf");
    fs::write(
        &conf,
        "profile ohio\nfile_size 20KB\ntrials 4\npolicy quicstep\npolicy native\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    let status = bin()
        .args(["run", "--config"])
        .arg(&conf)
        .args([
            "--trials", "3", "--policy", "tunnel", "--seed", "9", "--trace", "--out",
        ])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let samples = read_samples(&out.join("samples.csv")).unwrap();
    assert_eq!(samples.len(), 3);
    assert!(samples.iter().all(|s| s.success));
    assert!(out.join("trace_tunnel_2.log").exists());
    assert!(out.join("summary.txt").exists());
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("bad.conf");
    fs::write(&conf, "trials many\n").unwrap();
    let code = |args: &[&str]| bin().args(args).output().unwrap().status.code();
    assert_eq!(
        code(&["run", "--config", conf.to_str().unwrap(), "--out", "x"]),
        Some(1)
    );
    assert_eq!(code(&["oracle", "--config", "/nonexistent.conf"]), Some(1));
    assert_eq!(code(&["frobnicate"]), Some(1));
    fs::write(&conf, "mode sni-blocklist\n").unwrap();
    assert_eq!(
        code(&["oracle", "--config", conf.to_str().unwrap()]),
        Some(1)
    );
}

#[test]
fn oracle_prints_each_policy() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("exp.conf");
    fs::write(&conf, "file_size 1MB\n").unwrap();
    let out = bin()
        .args(["oracle", "--config"])
        .arg(&conf)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    let words = text.split_whitespace().collect::<Vec<_>>().join(" ");
    assert!(words.contains("native 320000 us"), "{text}");
    assert!(
        words.contains("quicstep 460000 us overhead vs native 140000 us"),
        "{text}"
    );
}
