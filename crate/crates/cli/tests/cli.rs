use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn fk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fk"))
        .args(args)
        .current_dir(root())
        .env_remove("FK_SEED")
        .output()
        .expect("fk runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn empty_action_list_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.scn");
    std::fs::write(&path, "[config]\nframe_count = 16\n\n[actions]\n").unwrap();
    let o = fk(&["run", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 expects, 0 failed"));
}

#[test]
fn malformed_scenario_exits_two_with_position() {
    let o = fk(&["run", "scenarios/negative/malformed.scn"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("6:1: unknown action"), "{}", stderr(&o));
}

#[test]
fn failing_expect_exits_one() {
    let o = fk(&["run", "scenarios/negative/failing_expect.scn"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn missing_file_exits_one() {
    let o = fk(&["run", "scenarios/nope.scn"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn census_scenario_passes() {
    let o = fk(&["run", "scenarios/demo/census_100.scn"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("130 expects, 0 failed"));
}

#[test]
fn negative_scenarios_behave() {
    for f in ["readonly_heap", "double_booking"] {
        let o = fk(&["run", &format!("scenarios/negative/{f}.scn")]);
        assert_eq!(o.status.code(), Some(0), "{f}: {}", stdout(&o));
    }
    let o = fk(&["run", "scenarios/negative/readonly_heap.scn"]);
    assert!(stdout(&o).contains("\"MutabilityViolation\""));
}

#[test]
fn seed_from_env_is_deterministic() {
    let run = |seed: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_fk"))
            .args(["run", "scenarios/demo/frames.scn"])
            .current_dir(root())
            .env("FK_SEED", seed)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        stdout(&o)
    };
    let a = run("41");
    assert!(a.starts_with("seed 41\n"));
    assert_eq!(a, run("41"));
    let flag = fk(&["run", "--seed", "41", "scenarios/demo/frames.scn"]);
    assert_eq!(stdout(&flag), a);
}

#[test]
fn snapshot_roundtrip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.snap");
    let b = dir.path().join("b.snap");
    let o = fk(&["snapshot", "dump", "scenarios/demo/privsep.scn", "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = fk(&["snapshot", "dump", a.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let o = fk(&["snapshot", "diff", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(stdout(&o), "0 frames differ\n");
    let o = fk(&["snapshot", "dump", a.to_str().unwrap()]);
    assert!(stdout(&o).starts_with("128 frames of 4096 bytes\n"));
}

#[test]
fn snapshot_diff_reports_changed_frames() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.scn");
    std::fs::write(&path, "[config]\nframe_count = 16\nbuddy = off\n\n[actions]\nclaim a 3\nwrite a 8 \"xyz\"\n").unwrap();
    let empty = dir.path().join("e.scn");
    std::fs::write(&empty, "[config]\nframe_count = 16\nbuddy = off\n\n[actions]\nclaim a 3\n").unwrap();
    let o = fk(&["snapshot", "diff", empty.to_str().unwrap(), path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "frame      3: 3 bytes changed from offset 0x8\n1 frames differ\n");
}

#[test]
fn oracle_traces_and_exit_codes() {
    let o = fk(&["oracle", "--trace", "crates/core/traces/drop_claim_race.trace"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stdout(&o).lines().count(), 1);
    assert!(stdout(&o).contains("\"DataRace\""));

    let o = fk(&["oracle", "--trace", "crates/core/traces/drop_claim_race.trace", "--exhaustive"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("6 schedules (all)"), "{}", stderr(&o));

    let o = fk(&["oracle", "--trace", "crates/core/traces/drop_claim_cas.trace", "--exhaustive"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "");

    let o = fk(&["oracle", "--trace", "crates/core/traces/heap_init_readonly.trace"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("\"MutabilityViolation\""));

    let o = fk(&["oracle", "--trace", "crates/core/traces/heap_init_mutable.trace"]);
    assert_eq!(o.status.code(), Some(0));

    let o = fk(&["oracle", "--attach", "scenarios/demo/echo_driver.scn"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn malformed_trace_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.trace");
    std::fs::write(&path, "t0 frobnicate 1\n").unwrap();
    let o = fk(&["oracle", "--trace", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bench_csv_has_header_and_filtered_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let o = fk(&["bench", "--filter", "^heap|yield", "--iters", "2000", "--csv", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "op,checked_ns,unchecked_ns,ratio");
    let ops: Vec<_> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ops, ["task_yield", "heap_object"]);
}

#[test]
fn tcb_report_is_clean() {
    let o = fk(&["tcb"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}
