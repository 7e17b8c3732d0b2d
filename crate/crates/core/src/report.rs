//! Report files: a JSON summary and CSV detail tables, with every number
//! rounded to 12 significant digits so that reruns compare byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::config::Format;
use crate::error::Result;
use crate::numeric::sig12;
use crate::suite::{Cell, Report, Table};
use crate::verify::CheckRecord;

fn round_value(v: &mut Value) {
    match v {
        Value::Number(num) => {
            if let Some(f) = num.as_f64() {
                if !(num.is_i64() || num.is_u64()) {
                    // -0 and 0 must print alike
                    if let Some(r) = serde_json::Number::from_f64(sig12(f) + 0.0) {
                        *num = r;
                    }
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_value),
        Value::Object(map) => map.values_mut().for_each(round_value),
        _ => {}
    }
}

/// Pretty JSON of the summary; non-finite numbers appear as null.
pub fn report_json(report: &Report) -> Result<String> {
    let mut v = serde_json::to_value(report)?;
    round_value(&mut v);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        let r = sig12(x) + 0.0;
        if r != 0.0 && (r.abs() < 1e-4 || r.abs() >= 1e15) {
            format!("{r:e}")
        } else {
            format!("{r}")
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn table_csv(table: &Table) -> String {
    let mut out = table
        .columns
        .iter()
        .map(|c| csv_field(c))
        .collect::<Vec<_>>()
        .join(",");
    out.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row
            .iter()
            .map(|c| match c {
                Cell::Int(i) => i.to_string(),
                Cell::Num(x) => fmt_num(*x),
                Cell::Text(t) => csv_field(t),
            })
            .collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn terms_field(r: &CheckRecord) -> String {
    let mut s = String::new();
    for (i, t) in r.terms.iter().enumerate() {
        if i > 0 {
            s.push(';');
        }
        let _ = write!(s, "{}={}", t.name, fmt_num(t.value));
    }
    s
}

/// One row per check record across all sections.
pub fn records_csv(report: &Report) -> String {
    let mut t = Table::new(
        "records",
        &[
            "section",
            "id",
            "context",
            "lhs",
            "rhs",
            "fitted",
            "criterion",
            "tolerance",
            "passed",
            "diagnostic",
            "terms",
        ],
    );
    for (sec, r) in report.records() {
        t.push(vec![
            sec.name.as_str().into(),
            r.id.as_str().into(),
            r.context.as_str().into(),
            r.lhs.into(),
            r.rhs.into(),
            r.fitted.into(),
            format!("{:?}", r.criterion).to_lowercase().into(),
            r.tolerance.into(),
            r.passed.into(),
            r.diagnostic.into(),
            terms_field(r).into(),
        ]);
    }
    table_csv(&t)
}

/// Tables with the same name across sections are concatenated.
fn merged_tables(report: &Report) -> Vec<Table> {
    let mut out: Vec<Table> = Vec::new();
    for sec in &report.sections {
        for t in &sec.tables {
            match out
                .iter_mut()
                .find(|o| o.name == t.name && o.columns == t.columns)
            {
                Some(o) => o.rows.extend(t.rows.iter().cloned()),
                None => out.push(t.clone()),
            }
        }
    }
    out
}

/// File names and contents of the report in write order.
pub fn render(report: &Report, formats: &[Format]) -> Result<Vec<(String, String)>> {
    let stem = &report.command;
    let mut out = Vec::new();
    if formats.contains(&Format::Json) {
        out.push((format!("{stem}.json"), report_json(report)?));
    }
    if formats.contains(&Format::Csv) {
        out.push((format!("{stem}_records.csv"), records_csv(report)));
        for t in merged_tables(report) {
            out.push((format!("{stem}_{}.csv", t.name), table_csv(&t)));
        }
    }
    Ok(out)
}

/// Writes the report files into `dir` and returns their paths in write order.
pub fn write_report(report: &Report, dir: &Path, formats: &[Format]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (name, body) in render(report, formats)? {
        let p = dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
    }
    Ok(written)
}

/// One line per failing or diagnostic-failing record and a closing count.
pub fn text_summary(report: &Report) -> String {
    let mut s = String::new();
    for (sec, r) in report.records() {
        if !r.passed {
            let _ = writeln!(
                s,
                "{} {}/{} [{}] lhs {} rhs {} fitted {}",
                if r.diagnostic { "diag" } else { "FAIL" },
                sec.name,
                r.id,
                r.context,
                fmt_num(r.lhs),
                fmt_num(r.rhs),
                fmt_num(r.fitted)
            );
        }
    }
    let m = &report.summary;
    let _ = writeln!(
        s,
        "{}: {} records, {} passed, {} failed, {} diagnostic",
        report.command, m.records, m.passed, m.failed, m.diagnostic
    );
    s
}
