//! End-to-end runs of the `gpux` binary.

use std::path::PathBuf;
use std::process::{Command, Output};

fn gpux(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gpux")).args(args).output().expect("binary runs")
}

fn root(rel: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel).display().to_string()
}

fn corpus(name: &str) -> String {
    root(&format!("crates/core/corpus/{name}"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("gpux-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir.join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_prints_a_json_report() {
    let o = gpux(&["run", &root("scenarios/stride.scn"), "--policy", &root("policies/stride.pol")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["policies"][0]["kind"], "STRIDE");
}

#[test]
fn run_writes_csv_and_log() {
    let out = scratch("report.csv");
    let log = scratch("events.tsv");
    let o = gpux(&[
        "run",
        &root("scenarios/zipf.scn"),
        "--format",
        "csv",
        "--out",
        out.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
        "--seed",
        "3",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.lines().count() >= 2);
    let tsv = std::fs::read_to_string(&log).unwrap();
    assert!(tsv.starts_with("time\tsource\tkind"));
    assert!(tsv.contains("\tACCESS\t"));
}

#[test]
fn verify_accepts_and_emits_binary() {
    let bin = scratch("prog.gpb");
    let o = gpux(&["verify", &corpus("accept_reduced_atomic.gpa"), "--emit", bin.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("verdict ACCEPT"));
    // the binary form verifies and disassembles too
    assert_eq!(gpux(&["verify", bin.to_str().unwrap()]).status.code(), Some(0));
    let d = gpux(&["disasm", bin.to_str().unwrap()]);
    assert!(stdout(&d).contains("call warp_reduce_max"));
}

#[test]
fn verify_rejection_exits_2() {
    let o = gpux(&["verify", &corpus("reject_divergent_branch.gpa")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("UNIFORM_BRANCH"));
}

#[test]
fn corpus_passes() {
    let o = gpux(&["corpus"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("0 failed"));
}

#[test]
fn tools_run() {
    let o = gpux(&["tool", "threadhist", &root("scenarios/skew.scn"), "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(v.to_string().contains("ratio"));
    let o = gpux(&["tool", "launchlate", &root("scenarios/lc_be.scn")]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(gpux(&["tool", "nosuch", &root("scenarios/skew.scn")]).status.code(), Some(1));
}

#[test]
fn gen_emits_a_trace() {
    let o = gpux(&["gen", "STRIDE(64KB)", "--working-set", "4MB", "--events", "10"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).lines().filter(|l| l.contains("ACCESS")).count(), 10);
    assert_eq!(gpux(&["gen", "WAVE"]).status.code(), Some(1));
}

#[test]
fn dump_maps_lists_map_contents() {
    let o = gpux(&["dump-maps", &root("scenarios/l2_stride.scn")]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.starts_with("map\tname\tepoch\tkey\tvalue"));
    assert!(text.lines().count() > 1);
}

#[test]
fn bad_scenarios_exit_3() {
    let path = scratch("bad.scn");
    std::fs::write(&path, "[device]\ncapacity = lots\nbogus = 1\n").unwrap();
    let o = gpux(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("capacity") && err.contains("bogus"), "{err}");
    assert_eq!(gpux(&["run", "/nonexistent.scn"]).status.code(), Some(3));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(gpux(&[]).status.code(), Some(1));
    assert_eq!(gpux(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(gpux(&["run", &root("scenarios/stride.scn"), "--format", "xml"]).status.code(), Some(1));
    assert_eq!(gpux(&["--help"]).status.code(), Some(0));
}
