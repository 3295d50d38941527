//! Helpers for driving the `feat` binary from integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Run `feat` with the given arguments; `--out` is inserted before the
/// subcommand when `out` is given.
pub fn feat(out: Option<&Path>, args: &[&str]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_feat"));
    if let Some(out) = out {
        cmd.arg("--out").arg(out);
    }
    let output = cmd.args(args).output().expect("spawn feat");
    Run {
        code: output.status.code().expect("feat exited by signal"),
        stdout: String::from_utf8_lossy(&output.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&output.stderr).into_owned(),
    }
}

pub fn write_json(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn read_report(out: &Path) -> Value {
    let text = std::fs::read_to_string(out.join("report.json")).expect("report.json");
    serde_json::from_str(&text).expect("report.json parses")
}

/// Report with the wall-clock fields removed.
pub fn deterministic_part(report: &Value) -> Value {
    let mut r = report.clone();
    let obj = r.as_object_mut().unwrap();
    obj.remove("wall_times");
    obj.remove("artifacts");
    r
}

pub fn metric(report: &Value, name: &str) -> f64 {
    report["metrics"][name].as_f64().unwrap_or_else(|| panic!("metric {name} missing"))
}

/// `(name, value, passed)` for every asserted property.
pub fn properties(report: &Value) -> Vec<(String, f64, bool)> {
    report["properties"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            (
                p["name"].as_str().unwrap().to_string(),
                p["value"].as_f64().unwrap_or(f64::NAN),
                p["passed"].as_bool().unwrap(),
            )
        })
        .collect()
}

/// Parsed CSV with a header row.
pub fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).expect("open csv");
    let header = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(str::to_string).collect())
        .collect();
    (header, rows)
}
