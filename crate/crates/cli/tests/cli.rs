use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn shipped_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/config_s.toml")
}

fn dualpair(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualpair"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("DUALPAIR_CONFIG")
        .env_remove("DUALPAIR_GRID")
        .env_remove("DUALPAIR_THREADS")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Config S with the given lines replaced, written next to the report.
fn variant(dir: &Path, edits: &[(&str, &str)]) -> PathBuf {
    let mut text = std::fs::read_to_string(shipped_config()).unwrap();
    for (from, to) in edits {
        assert!(text.contains(from), "{from} not in config");
        text = text.replace(from, to);
    }
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn exponents_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dualpair(&["exponents"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v = read_json(&dir.path().join("exponents.json"));
    let values = &v["sections"][0]["values"];
    assert!((values["eta"].as_f64().unwrap() - 1.294118).abs() < 1e-6);
    assert!((values["gamma"].as_f64().unwrap() - 1.294118).abs() < 1e-6);
    assert!((values["theta"].as_f64().unwrap() - 0.227273).abs() < 1e-6);
    assert_eq!(v["summary"]["exit_code"], 0);
    assert!(dir.path().join("exponents_records.csv").exists());
}

#[test]
fn constant_function_decomposes_to_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(
        dir.path(),
        &[
            (
                "decompose = [\"bump\", \"trig-random(7)\"]",
                "decompose = [\"constant(1)\"]",
            ),
            ("f = \"bump\"", "f = \"constant(0)\""),
            ("grid = 32", "grid = 16"),
        ],
    );
    let out = dualpair(
        &["decompose", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let runs = std::fs::read_to_string(dir.path().join("decompose_runs.csv")).unwrap();
    let mut lines = runs.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .unwrap_or_else(|| panic!("{name} column"))
    };
    let (cubes, balls) = (col("h_lambda"), col("balls"));
    let mut rows = 0;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[cubes], "0");
        assert_eq!(cells[balls], "0");
        rows += 1;
    }
    assert_eq!(rows, 2);
    let balls_csv =
        std::fs::read_to_string(dir.path().join("decompose_balls.csv")).unwrap_or_default();
    assert!(balls_csv.lines().count() <= 1);
}

#[test]
fn reports_do_not_depend_on_threads() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = dualpair(&["decompose", "--grid", "16", "--threads", "1"], a.path());
    let rb = dualpair(&["decompose", "--grid", "16", "--threads", "2"], b.path());
    assert!(ra.status.success() && rb.status.success());
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(names.len() >= 3);
    for name in names {
        let (pa, pb) = (a.path().join(&name), b.path().join(&name));
        if name.to_string_lossy().ends_with(".json") {
            // the echoed config carries the thread count and the output directory
            let (mut x, mut y) = (read_json(&pa), read_json(&pb));
            for v in [&mut x, &mut y] {
                v["config"]["execution"]["threads"] = Value::Null;
                v["config"]["output"]["dir"] = Value::Null;
            }
            assert_eq!(x, y, "{name:?} differs");
        } else {
            assert_eq!(
                std::fs::read(pa).unwrap(),
                std::fs::read(pb).unwrap(),
                "{name:?} differs"
            );
        }
    }
}

#[test]
fn invalid_config_is_rejected_with_field_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), &[("alpha = 0.95", "alpha = 0.5")]);
    let out = dualpair(
        &["exponents", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("geometry.alpha"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = variant(dir.path(), &[("seed = 7", "seed = 7\nsede = 8")]);
    let out = dualpair(
        &["exponents", "--config", cfg.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}
