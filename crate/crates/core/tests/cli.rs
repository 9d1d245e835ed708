mod support;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use support::{snapshot, write};

fn tbld(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tbld"))
        .args(args)
        .current_dir(dir)
        .env_remove("TBLD_DIR")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn project() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "Buildfile", "SPAWN c cp.bsh in.txt out.txt\nWAIT c -> rc\nWRITE @stdout done\nEXIT $rc\n");
    write(d.path(), "cp.bsh", "READ $1 -> x\nWRITE $2 copied $x\n");
    write(d.path(), "in.txt", "hello\n");
    d
}

#[test]
fn build_then_noop() {
    let d = project();
    let o = tbld(d.path(), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o), "done");
    assert!(stderr(&o).contains("tbld: 2 commands run, 0 skipped, 2 phase(s)"), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(d.path().join("out.txt")).unwrap(), "copied hello");

    let o = tbld(d.path(), &["--stats"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("commands_traced: 0"), "{}", stderr(&o));
    assert!(stderr(&o).contains("tbld: 0 commands run"), "{}", stderr(&o));
}

#[test]
fn missing_build_file_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = tbld(d.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no build file"));
    assert_eq!(tbld(d.path(), &["--no-such-flag"]).status.code(), Some(2));
}

#[test]
fn failing_script_exits_one() {
    let d = tempfile::tempdir().unwrap();
    write(d.path(), "Buildfile", "EXIT 3\n");
    let o = tbld(d.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exited with status 3"), "{}", stderr(&o));
}

#[test]
fn corrupt_trace_reports_offset() {
    let d = project();
    assert_eq!(tbld(d.path(), &[]).status.code(), Some(0));
    let trace = d.path().join(".tbld/trace.bin");
    let mut bytes = fs::read(&trace).unwrap();
    bytes.truncate(bytes.len() - 3);
    fs::write(&trace, bytes).unwrap();
    let o = tbld(d.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("offset"), "{}", stderr(&o));
    let o = tbld(d.path(), &["trace", "dump"]);
    assert_eq!(o.status.code(), Some(2));

    // --fresh starts over.
    let o = tbld(d.path(), &["--fresh"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn dry_run_lists_commands_and_changes_nothing() {
    let d = project();
    tbld(d.path(), &[]);
    write(d.path(), "in.txt", "changed\n");
    let before = snapshot(d.path());
    let trace = fs::read(d.path().join(".tbld/trace.bin")).unwrap();
    let o = tbld(d.path(), &["--dry-run"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "cp.bsh in.txt out.txt\n");
    assert_eq!(snapshot(d.path()), before);
    assert_eq!(fs::read(d.path().join(".tbld/trace.bin")).unwrap(), trace);

    let o = tbld(d.path(), &["--show"]);
    assert_eq!(stderr(&o).lines().next(), Some("cp.bsh in.txt out.txt"));
    assert_eq!(fs::read_to_string(d.path().join("out.txt")).unwrap(), "copied changed");
}

#[test]
fn state_dir_overrides() {
    let d = project();
    let o = tbld(d.path(), &["--state-dir", "st"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(d.path().join("st/trace.bin").exists());
    assert!(!d.path().join(".tbld").exists());

    let o = Command::new(env!("CARGO_BIN_EXE_tbld"))
        .current_dir(d.path())
        .env("TBLD_DIR", "envstate")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(d.path().join("envstate/trace.bin").exists());
}

#[test]
fn dump_and_gc() {
    let d = project();
    tbld(d.path(), &[]);
    let o = tbld(d.path(), &["trace", "dump"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("# tbld trace format 1\n"));
    assert!(text.contains("cp_bsh_2 = Launch(Buildfile_1, \"cp.bsh in.txt out.txt\""), "{text}");

    write(d.path(), "in.txt", "again\n");
    tbld(d.path(), &[]);
    let o = tbld(d.path(), &["gc"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).starts_with("removed "), "{}", stdout(&o));
}
