use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rsd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rsd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn deterministic_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = rsd(&[
            "toy-bimodal",
            "--seeds",
            "3",
            "--seed-base",
            "10",
            "--deterministic",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        assert!(stdout(&out).contains("wrote"));
    }
    for f in [
        "record.json",
        "metrics.csv",
        "summary.csv",
        "config.toml",
        "particles_10.csv",
        "particles_12.csv",
    ] {
        assert!(a.path().join(f).exists(), "missing {f}");
    }
    assert_eq!(csvs(a.path()), csvs(b.path()));

    let report = rsd(&["report", a.path().to_str().unwrap()]);
    assert!(report.status.success());
    assert!(stdout(&report).contains("gamma=1.0"));
}

#[test]
fn printed_config_runs_back_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let printed = rsd(&[
        "bw-flow",
        "--target",
        "bimodal",
        "--seeds",
        "2",
        "--print-config",
    ]);
    assert!(printed.status.success());
    let path = dir.path().join("bw.toml");
    fs::write(&path, printed.stdout).unwrap();
    let out_dir = dir.path().join("out");
    let run = rsd(&[
        "bw-flow",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(out_dir.join("particles_0.csv").exists());
    assert!(out_dir.join("particles_1.csv").exists());
    assert!(!out_dir.join("particles_2.csv").exists());
}

#[test]
fn config_kind_must_match_the_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let printed = rsd(&["compare", "--print-config"]);
    let path = dir.path().join("compare.toml");
    fs::write(&path, printed.stdout).unwrap();
    let out = rsd(&["gamma-sweep", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sampler_compare"));
}

#[test]
fn measurement_csv_is_resolved_next_to_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let printed = stdout(&rsd(&[
        "invert",
        "--task",
        "coverage",
        "--seeds",
        "2",
        "--print-config",
    ]));
    let mut config: toml::Table = printed.parse().unwrap();
    let inverse = config["inverse"].as_table_mut().unwrap();
    let mut csv = toml::Table::new();
    csv.insert("csv".into(), "y.csv".into());
    inverse.insert("y".into(), csv.into());
    fs::write(dir.path().join("y.csv"), "0.0\n").unwrap();
    let path = dir.path().join("cover.toml");
    fs::write(&path, toml::to_string(&config).unwrap()).unwrap();

    let out_dir = dir.path().join("out");
    let out = rsd(&[
        "invert",
        "--config",
        path.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out_dir.join("diagnostics_0.csv").exists());
}

#[test]
fn unknown_fields_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut text = stdout(&rsd(&["toy-bimodal", "--print-config"]));
    text.push_str("\nsurprise = 1\n");
    let path = dir.path().join("bad.toml");
    fs::write(&path, text).unwrap();
    assert!(!rsd(&["toy-bimodal", "--config", path.to_str().unwrap()])
        .status
        .success());
}
