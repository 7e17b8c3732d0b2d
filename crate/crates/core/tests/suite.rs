use std::path::PathBuf;

use serde_json::Value;

use dualpair::config::RunConfig;
use dualpair::pipeline::CubeTag;
use dualpair::report::report_json;
use dualpair::suite::{Command, Suite};

fn grid16() -> RunConfig {
    RunConfig::default().with_grid(16)
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// Structural equality with a relative tolerance on numbers.
fn json_close(a: &Value, b: &Value, path: &str, diffs: &mut Vec<String>) {
    match (a, b) {
        (Value::Number(x), Value::Number(y)) => {
            let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
            if (x - y).abs() > 1e-9 * x.abs().max(y.abs()).max(1e-300) {
                diffs.push(format!("{path}: {x} vs {y}"));
            }
        }
        (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
            for (i, (u, v)) in x.iter().zip(y).enumerate() {
                json_close(u, v, &format!("{path}[{i}]"), diffs);
            }
        }
        (Value::Object(x), Value::Object(y)) if x.len() == y.len() => {
            for (k, u) in x {
                match y.get(k) {
                    Some(v) => json_close(u, v, &format!("{path}.{k}"), diffs),
                    None => diffs.push(format!("{path}.{k}: missing")),
                }
            }
        }
        _ if a == b => {}
        _ => diffs.push(format!("{path}: {a} vs {b}")),
    }
}

fn check_golden(name: &str, body: &str) {
    let path = golden_path(name);
    if std::env::var_os("DUALPAIR_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, body).unwrap();
        return;
    }
    let want: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let got: Value = serde_json::from_str(body).unwrap();
    let mut diffs = Vec::new();
    json_close(&got, &want, "", &mut diffs);
    assert!(
        diffs.is_empty(),
        "{} differences, first: {:?}",
        diffs.len(),
        &diffs[..diffs.len().min(10)]
    );
}

#[test]
fn shipped_config_matches_defaults() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/config_s.toml");
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn exponents_section_values() {
    let suite = Suite::new(grid16()).unwrap();
    let report = suite.run(Command::Exponents).unwrap();
    let sec = report.section("exponents").unwrap();
    let get = |k: &str| sec.values[k];
    assert!((get("eta") - 1.294118).abs() < 1e-6);
    assert!((get("gamma") - 1.294118).abs() < 1e-6);
    assert!((get("theta") - 0.227273).abs() < 1e-6);
    assert!((get("p_lower_s") - 1.25).abs() < 1e-12);
    // direct partial sum of 2^{-0.3 k}
    let direct: f64 = (0..400).map(|k| 2f64.powf(-0.3 * k as f64)).sum();
    assert!((sec.record("tail-weight-sum").unwrap().lhs - direct).abs() < 1e-12);
    assert!((direct - 5.3263).abs() < 1e-4);
    assert_eq!(report.summary.failed, 0);
}

#[test]
fn decompose_golden_grid16() {
    let report = Suite::new(grid16())
        .unwrap()
        .run(Command::Decompose)
        .unwrap();
    assert_eq!(report.summary.failed, 0);
    check_golden("decompose_grid16.json", &report_json(&report).unwrap());
}

#[test]
fn measure_golden_grid16() {
    let report = Suite::new(grid16()).unwrap().run(Command::Measure).unwrap();
    assert_eq!(report.summary.failed, 0);
    check_golden("measure_grid16.json", &report_json(&report).unwrap());
}

#[test]
fn constant_function_has_empty_families() {
    let mut cfg = grid16();
    cfg.functions.decompose = vec!["constant(1)".into()];
    let suite = Suite::new(cfg).unwrap();
    let run = suite.field_run("constant(1)").unwrap();
    assert!(!run.runs.is_empty());
    for r in &run.runs {
        assert!(r.h_lambda.is_empty());
        assert!(r.families.records.is_empty());
        assert_eq!(r.families.count(CubeTag::BadUncovered), 0);
        assert!(r.cover.level_set.is_empty());
        assert!(r.sound());
    }
    let sections = suite.decompose(false).unwrap();
    assert!(sections
        .iter()
        .all(|s| s.records.iter().all(|c| c.passed || c.diagnostic)));
}

#[test]
fn rerun_is_byte_identical() {
    let a = report_json(&Suite::new(grid16()).unwrap().run(Command::Measure).unwrap()).unwrap();
    let b = report_json(&Suite::new(grid16()).unwrap().run(Command::Measure).unwrap()).unwrap();
    assert_eq!(a, b);
}
