use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn nullctl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nullctl"))
        .args(args)
        .output()
        .unwrap()
}

fn run_in(dir: &Path, name: &str, args: &[&str]) -> Output {
    let out = dir.join(name);
    let mut all = args.to_vec();
    all.extend(["--out", out.to_str().unwrap()]);
    nullctl(&all)
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for suite in ["simulate", "hum-semilinear", "decay-sweep"] {
        let a = run_in(
            dir.path(),
            &format!("{suite}-a"),
            &[suite, "--seed", "7", "--jobs", "2"],
        );
        let b = run_in(
            dir.path(),
            &format!("{suite}-b"),
            &[suite, "--seed", "7", "--jobs", "3"],
        );
        assert_eq!(
            a.status.code(),
            Some(0),
            "{suite}: {}",
            String::from_utf8_lossy(&a.stderr)
        );
        assert_eq!(b.status.code(), Some(0));
        for file in ["results.csv", "report.json"] {
            let x = fs::read(dir.path().join(format!("{suite}-a")).join(file)).unwrap();
            let y = fs::read(dir.path().join(format!("{suite}-b")).join(file)).unwrap();
            assert_eq!(x, y, "{suite}/{file}");
        }
    }
}

#[test]
fn weights_dump_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "w", &["weights", "--dump"]);
    assert!(out.status.success());
    let text = fs::read_to_string(dir.path().join("w/weights.csv")).unwrap();
    assert_eq!(text.lines().next(), Some("t,x,theta,phi,s,r"));
    let report: serde_like::Report =
        serde_like::parse(&fs::read_to_string(dir.path().join("w/report.json")).unwrap());
    assert!(report.passed && report.suite == "weights");
}

#[test]
fn check_calculus_default_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), "c", &["check-calculus"]);
    assert_eq!(out.status.code(), Some(0));
    let rows = fs::read_to_string(dir.path().join("c/results.csv")).unwrap();
    assert!(rows.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[mesh]\nunknown_key = 1\n").unwrap();
    let out = run_in(
        dir.path(),
        "e",
        &["simulate", "--config", bad.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_key"));

    // A contract that cannot hold: fewer samples than required.
    let cfg = dir.path().join("few.toml");
    fs::write(&cfg, "[carleman]\nsamples = 5\ndelta = 0.3\n").unwrap();
    let out = run_in(
        dir.path(),
        "f",
        &["carleman-check", "--config", cfg.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("samples per mesh"));
}

/// Minimal field extraction so the test does not need a JSON dependency.
mod serde_like {
    pub struct Report {
        pub passed: bool,
        pub suite: String,
    }

    pub fn parse(text: &str) -> Report {
        let field = |key: &str| {
            let start = text.find(&format!("\"{key}\": ")).unwrap() + key.len() + 4;
            text[start..]
                .split([',', '\n'])
                .next()
                .unwrap()
                .trim()
                .trim_matches('"')
                .to_string()
        };
        Report {
            passed: field("passed") == "true",
            suite: field("suite"),
        }
    }
}
