use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn cli(out: &Path, config: &str, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_profile-pref"))
        .arg("--config")
        .arg(fixtures().join(config))
        .arg("--output")
        .arg(out)
        .arg("--mock")
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_all_then_report_on_oracle_fixture() {
    let d = tempfile::tempdir().unwrap();
    let run = cli(d.path(), "oracle.toml", &["--parallel", "2", "run-all"]);
    assert_eq!(run.status.code(), Some(0), "{}", stderr(&run));

    let report = cli(d.path(), "oracle.toml", &["report"]);
    assert_eq!(report.status.code(), Some(0), "{}", stderr(&report));
    let text = stdout(&report);
    let rows: Vec<&str> = text.lines().skip(1).take(4).collect();
    assert_eq!(rows.len(), 4);
    for (row, name) in rows.iter().zip(["10H", "10H+30P", "10H+50P", "10H+70P"]) {
        let cols: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(cols[..4], [name, "1.0000", "1.0000", "1.0000"], "{row}");
    }
    assert!(text.contains("preference pairs: 0"), "{text}");

    let again = cli(d.path(), "oracle.toml", &["evaluate"]);
    assert_eq!(again.status.code(), Some(0));
    assert!(stdout(&again).contains("already complete"));
}

#[test]
fn pairs_before_evaluate_is_a_stage_error() {
    let d = tempfile::tempdir().unwrap();
    for stage in ["ingest", "explore"] {
        let o = cli(d.path(), "scripted.toml", &[stage]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let o = cli(d.path(), "scripted.toml", &["pairs"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("evaluate"), "{}", stderr(&o));
}

#[test]
fn config_problems_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let o = cli(d.path(), "absent.toml", &["ingest"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = d.path().join("bad.toml");
    let text = std::fs::read_to_string(fixtures().join("oracle.toml"))
        .unwrap()
        .replace("movielens/", &format!("{}/movielens/", fixtures().display()))
        .replace("temperature = 0.0", "temperature = 0.7");
    std::fs::write(&bad, text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_profile-pref"))
        .args(["--config", bad.to_str().unwrap(), "--output", d.path().to_str().unwrap(), "ingest"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("predictor.temperature"), "{}", stderr(&o));
}

#[test]
fn fixture_command_reproduces_bundled_corpus() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_profile-pref"))
        .args(["fixture", "--out"])
        .arg(d.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    for f in ["ratings.dat", "movies.dat"] {
        let fresh = std::fs::read(d.path().join(f)).unwrap();
        let bundled = std::fs::read(fixtures().join("movielens").join(f)).unwrap();
        assert!(fresh == bundled, "{f} differs from the bundled copy");
    }
}

#[test]
fn templates_dump_writes_every_template() {
    let d = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_profile-pref"))
        .args(["templates-dump", "--dir"])
        .arg(d.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let n = std::fs::read_dir(d.path()).unwrap().count();
    assert_eq!(n, stdout(&o).lines().count());
    assert!(n >= 5);
}
