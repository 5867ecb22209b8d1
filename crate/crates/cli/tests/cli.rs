use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const FLEET4: &str = "[fleet]\nnodes = 4\n";

fn bolted(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bolted"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("run bolted")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn init(config: &str) -> TempDir {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("fleet.toml"), config).unwrap();
    let o = bolted(dir.path(), &["init", "--config", "fleet.toml", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    dir
}

fn count_state(status: &str, state: &str) -> usize {
    status
        .lines()
        .filter(|l| l.starts_with("node-") && l.split_whitespace().nth(1) == Some(state))
        .count()
}

#[test]
fn init_lists_free_nodes() {
    let dir = init(FLEET4);
    let o = bolted(dir.path(), &["status"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(count_state(&stdout(&o), "Free"), 4);
    assert!(std::fs::read_to_string(dir.path().join("bolted.state"))
        .unwrap()
        .starts_with("# bolted-state\n"));
}

#[test]
fn init_refuses_overwrite_without_force() {
    let dir = init(FLEET4);
    let o = bolted(dir.path(), &["init", "--config", "fleet.toml", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--force"));
    let o = bolted(dir.path(), &["init", "--config", "fleet.toml", "--seed", "1", "--force"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn init_names_duplicate_uuid() {
    let dir = TempDir::new().unwrap();
    let cfg = "[fleet]\nnodes = 0\n\n[[node]]\nuuid = \"n-a\"\n\n[[node]]\nuuid = \"n-a\"\n";
    std::fs::write(dir.path().join("fleet.toml"), cfg).unwrap();
    let o = bolted(dir.path(), &["init", "--config", "fleet.toml"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("n-a") && err.contains("line 8"), "{err}");
}

#[test]
fn init_reports_parse_line() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("fleet.toml"), "[fleet]\nnodes = \"four\"\n").unwrap();
    let o = bolted(dir.path(), &["init", "--config", "fleet.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn admit_two_of_four() {
    let dir = init(FLEET4);
    let o = bolted(dir.path(), &["admit", "--tenant", "alice", "--count", "2", "--profile", "full", "--seed", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("Allocated").count(), 2);
    let s = stdout(&bolted(dir.path(), &["status"]));
    assert_eq!(count_state(&s, "Allocated"), 2);
    assert_eq!(count_state(&s, "Free"), 2);
}

#[test]
fn admit_tampered_node_is_a_handled_rejection() {
    let cfg = "[fleet]\nnodes = 4\n\n[[tamper]]\nnode = \"node-01\"\nstage = \"nerf-ram-stage\"\nposition = 0\nvalue = 7\n";
    let dir = init(cfg);
    let o = bolted(dir.path(), &["admit", "--tenant", "alice", "--count", "4", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("node-01 Rejected"), "{out}");
    assert_eq!(out.matches("Allocated").count(), 3);
}

#[test]
fn admit_over_capacity_exits_nonzero() {
    let dir = init(FLEET4);
    let o = bolted(dir.path(), &["admit", "--tenant", "alice", "--count", "5", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert_eq!(out.matches("Allocated").count(), 4);
    assert!(out.contains("NoFreeNodes"), "{out}");
    let s = stdout(&bolted(dir.path(), &["status"]));
    assert_eq!(count_state(&s, "Allocated"), 4);
}

#[test]
fn release_then_readmit_other_tenant() {
    let dir = init("[fleet]\nnodes = 1\n");
    assert_eq!(bolted(dir.path(), &["admit", "--tenant", "alice", "--seed", "5"]).status.code(), Some(0));
    let o = bolted(dir.path(), &["release", "--node", "node-00", "--seed", "6"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("node-00 Free"));
    let o = bolted(dir.path(), &["admit", "--tenant", "bob", "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&bolted(dir.path(), &["status"])).contains("node-00 Allocated bob"));
}

#[test]
fn release_of_free_node_is_usage_error() {
    let dir = init(FLEET4);
    let o = bolted(dir.path(), &["release", "--node", "node-00", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn clean_returns_rejected_node() {
    let cfg = "[fleet]\nnodes = 1\n\n[[tamper]]\nnode = \"node-00\"\nstage = \"acm\"\nposition = 0\nvalue = 9\n";
    let dir = init(cfg);
    let o = bolted(dir.path(), &["admit", "--tenant", "alice", "--seed", "8"]);
    assert!(stdout(&o).contains("node-00 Rejected"));
    let o = bolted(dir.path(), &["clean", "--node", "node-00", "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("node-00 Free"));
}

#[test]
fn missing_seed_is_random_and_printed() {
    let dir = init("[fleet]\nnodes = 1\n");
    let o = bolted(dir.path(), &["admit", "--tenant", "alice"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).starts_with("seed: "), "{}", stderr(&o));
}

#[test]
fn same_seed_gives_same_state_file() {
    let a = init(FLEET4);
    let b = init(FLEET4);
    for d in [&a, &b] {
        let o = bolted(d.path(), &["admit", "--tenant", "alice", "--count", "3", "--seed", "11"]);
        assert_eq!(o.status.code(), Some(0));
    }
    let read = |d: &TempDir| std::fs::read(d.path().join("bolted.state")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn tampered_state_file_is_refused() {
    let dir = init(FLEET4);
    let path = dir.path().join("bolted.state");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replacen("tick = 0", "tick = 9", 1)).unwrap();
    let o = bolted(dir.path(), &["status"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum mismatch"));
}

#[test]
fn state_path_flag_is_honoured() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("fleet.toml"), FLEET4).unwrap();
    let o = bolted(dir.path(), &["--state", "other.state", "init", "--config", "fleet.toml", "--seed", "1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("other.state").exists());
    assert_eq!(bolted(dir.path(), &["status"]).status.code(), Some(2));
    assert_eq!(bolted(dir.path(), &["status", "--state", "other.state"]).status.code(), Some(0));
}

#[test]
fn bundled_tamper_firmware_scenario_passes() {
    let dir = TempDir::new().unwrap();
    let o = bolted(dir.path(), &["scenario", "--bundled", "tamper-firmware", "--out", "out"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("Rejected"));
    assert!(dir.path().join("out/tamper-firmware.trace").exists());
    assert!(dir.path().join("out/tamper-firmware.report").exists());
}

#[test]
fn bundled_concurrent_16_scenario_passes() {
    let dir = TempDir::new().unwrap();
    let o = bolted(dir.path(), &["scenario", "--bundled", "concurrent-16", "--out", "."]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.trim_start().starts_with("node-") && l.contains(" Allocated ")).count(), 16, "{out}");
    assert!(out.contains("invariant violations: 0"));
}

#[test]
fn malformed_scenario_exits_2() {
    let dir = TempDir::new().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[scenario\nname = 1\n").unwrap();
    let o = bolted(dir.path(), &["scenario", "--file", "bad.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
}

#[test]
fn failed_expectation_exits_1() {
    let dir = TempDir::new().unwrap();
    let text = scenario_text();
    std::fs::write(dir.path().join("s.toml"), text).unwrap();
    let o = bolted(dir.path(), &["scenario", "--file", "s.toml", "--out", "."]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("[FAIL]"));
}

fn scenario_text() -> String {
    let base = bundled_file("tamper-firmware");
    base.replace("state = \"Rejected\"", "state = \"Allocated\"")
}

fn bundled_file(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join(format!("../core/scenarios/{name}.toml"));
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = TempDir::new().unwrap();
    assert_eq!(bolted(dir.path(), &["status", "--bogus"]).status.code(), Some(2));
}

#[test]
fn scenarios_lists_bundled() {
    let dir = TempDir::new().unwrap();
    let out = stdout(&bolted(dir.path(), &["scenarios"]));
    assert!(out.contains("release-readmit") && out.contains("eavesdropper"));
}
