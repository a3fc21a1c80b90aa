//! End-to-end runs of the `tlsekit` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tlsekit::cli::{CondOutput, SolveOutput};

fn tlsekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlsekit"))
        .args(args)
        .env_remove("TLSEKIT_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path_arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero() {
    let o = tlsekit(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("solve"));
}

#[test]
fn unknown_flag_exits_one() {
    assert_eq!(tlsekit(&["solve", "--bogus"]).status.code(), Some(1));
}

#[test]
fn json_output_round_trips_byte_for_byte() {
    let o = tlsekit(&["solve", "--dims", "2,10,6,2", "--seed", "5", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let parsed: SolveOutput = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&parsed).unwrap() + "\n", text);

    let o = tlsekit(&["cond", "--dims", "2,10,6,2", "--seed", "5", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    let parsed: CondOutput = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&parsed).unwrap() + "\n", text);
}

#[test]
fn missing_seed_is_injected_and_reported() {
    let o = tlsekit(&["solve", "--dims", "1,8,4,1"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("pass --seed"));
}

#[test]
fn generated_files_reproduce_the_generator_solution() {
    for (format, ext) in [("csv", "csv"), ("mm", "mtx")] {
        let dir = tempfile::tempdir().unwrap();
        let gen = tlsekit(&[
            "gen", "--dims", "2,10,6,2", "--seed", "11", "--out-dir", path_arg(dir.path()), "--matrix-format", format,
        ]);
        assert_eq!(gen.status.code(), Some(0), "{}", stderr(&gen));
        let file = |name: &str| dir.path().join(format!("{name}.{ext}"));
        let (a, b, c, d) = (file("A"), file("B"), file("C"), file("D"));
        let from_files = tlsekit(&[
            "solve", "--A", path_arg(&a), "--B", path_arg(&b), "--C", path_arg(&c), "--D", path_arg(&d), "--format", "json",
        ]);
        assert_eq!(from_files.status.code(), Some(0), "{}", stderr(&from_files));
        let direct = tlsekit(&["solve", "--dims", "2,10,6,2", "--seed", "11", "--format", "json"]);
        let x1: SolveOutput = serde_json::from_str(&stdout(&from_files)).unwrap();
        let x2: SolveOutput = serde_json::from_str(&stdout(&direct)).unwrap();
        assert_eq!(x1.x_t, x2.x_t, "{format}");
    }
}

#[test]
fn rank_deficient_constraints_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let write = |name: &str, text: &str| {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    };
    let a = write("A.csv", "1,0,0\n0,1,0\n0,0,1\n1,1,0\n0,1,1\n");
    let b = write("B.csv", "1\n2\n3\n4\n5\n");
    // second row is twice the first
    let c = write("C.csv", "1,2,3\n2,4,6\n");
    let d = write("D.csv", "1\n2\n");
    let o = tlsekit(&["solve", "--A", path_arg(&a), "--B", path_arg(&b), "--C", path_arg(&c), "--D", path_arg(&d)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("constraint matrix rank-deficient"), "{}", stderr(&o));
}

#[test]
fn ragged_csv_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("A.csv");
    fs::write(&a, "1,2,3\n4,5\n").unwrap();
    let b = dir.path().join("B.csv");
    fs::write(&b, "1\n2\n").unwrap();
    let o = tlsekit(&["solve", "--A", path_arg(&a), "--B", path_arg(&b)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ragged"), "{}", stderr(&o));
}
