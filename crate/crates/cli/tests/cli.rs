use std::path::Path;
use std::process::{Command, Output};

fn prune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prune"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("failed to launch prune")
}

const SMALL: &str = "controllers = [\"closed_loop\", \"open_loop_miscal\"]\ntargets = 2\ntrials_per_target = 2\n";

#[test]
fn trial_is_reproducible_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    for out in ["a", "b"] {
        let o = prune(dir.path(), &["trial", "--config", "small.toml", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = std::fs::read(dir.path().join("a/trials.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b/trials.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 4 * 2);
    assert!(dir.path().join("a/summary.md").exists());
}

#[test]
fn render_writes_full_size_ppm_frames() {
    let dir = tempfile::tempdir().unwrap();
    let o = prune(dir.path(), &["render", "--out", "r", "--seed", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let bytes = std::fs::read(dir.path().join("r/frames/ep0/step0.ppm")).unwrap();
    let header = b"P6\n424 240\n255\n";
    assert!(bytes.starts_with(header));
    assert_eq!(bytes.len(), header.len() + 424 * 240 * 3);
}

#[test]
fn trace_writes_both_traces() {
    let dir = tempfile::tempdir().unwrap();
    let o = prune(dir.path(), &["trace", "--controller", "closed-loop", "--out", "t"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let step = std::fs::read_to_string(dir.path().join("t/step_trace.csv")).unwrap();
    assert!(step.starts_with("tick,time,phase"));
    let ctl = std::fs::read_to_string(dir.path().join("t/controller_trace.csv")).unwrap();
    assert!(ctl.starts_with("time,raw_tx"));
}

#[test]
fn config_problems_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(prune(dir.path(), &["trial", "--config", "missing.toml"]).status.code(), Some(1));
    std::fs::write(dir.path().join("typo.toml"), "sed = 3\n").unwrap();
    let o = prune(dir.path(), &["trial", "--config", "typo.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown field"));
    // Hybrid is enabled by default and needs a checkpoint.
    assert_eq!(prune(dir.path(), &["trial"]).status.code(), Some(1));
    assert_eq!(prune(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn unreadable_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.bin"), b"not a checkpoint").unwrap();
    let o = prune(dir.path(), &["eval", "--checkpoint", "junk.bin", "--episodes", "2"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
