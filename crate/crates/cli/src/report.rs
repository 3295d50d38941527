//! Machine-readable run reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Acceptance rule of an asserted property.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "bound")]
pub enum Threshold {
    /// `value < bound`.
    Below(f64),
    /// `value ≤ bound`.
    AtMost(f64),
    /// `value ≥ bound`.
    AtLeast(f64),
    /// `lo ≤ value ≤ hi`.
    Within([f64; 2]),
    /// `value == bound` exactly.
    Equals(f64),
}

impl Threshold {
    pub fn accepts(self, v: f64) -> bool {
        match self {
            Threshold::Below(b) => v < b,
            Threshold::AtMost(b) => v <= b,
            Threshold::AtLeast(b) => v >= b,
            Threshold::Within([lo, hi]) => lo <= v && v <= hi,
            Threshold::Equals(b) => v == b,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub value: f64,
    pub threshold: Threshold,
    pub passed: bool,
}

/// One command invocation: its configuration, measurements and verdicts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
    pub properties: Vec<PropertyCheck>,
    /// Seconds per phase; the only nondeterministic fields.
    pub wall_times: BTreeMap<String, f64>,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    pub fn new<C: Serialize>(command: &str, config: &C, seed: u64) -> Result<Self, CliError> {
        Ok(RunReport {
            command: command.to_string(),
            config: serde_json::to_value(config).map_err(|e| CliError::Internal(e.to_string()))?,
            seed,
            metrics: BTreeMap::new(),
            properties: Vec::new(),
            wall_times: BTreeMap::new(),
            artifacts: Vec::new(),
        })
    }

    pub fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    pub fn check(&mut self, name: impl Into<String>, value: f64, threshold: Threshold) -> bool {
        let passed = threshold.accepts(value);
        self.properties.push(PropertyCheck {
            name: name.into(),
            value,
            threshold,
            passed,
        });
        passed
    }

    pub fn time(&mut self, phase: &str, start: std::time::Instant) {
        self.wall_times.insert(phase.to_string(), start.elapsed().as_secs_f64());
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    pub fn failures(&self) -> Vec<&str> {
        self.properties.iter().filter(|p| !p.passed).map(|p| p.name.as_str()).collect()
    }

    /// Write `report.json` into `out` and return the document.
    pub fn write(&mut self, out: &Path) -> Result<String, CliError> {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let path = out.join("report.json");
        self.artifacts.push(path.clone());
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Internal(e.to_string()))?;
        std::fs::write(&path, format!("{text}\n")).map_err(|e| CliError::io(&path, e))?;
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds() {
        assert!(Threshold::Below(1.0).accepts(0.5) && !Threshold::Below(1.0).accepts(1.0));
        assert!(Threshold::AtMost(1.0).accepts(1.0));
        assert!(Threshold::Within([1.85, 2.15]).accepts(2.0) && !Threshold::Within([1.85, 2.15]).accepts(2.2));
        assert!(!Threshold::Equals(0.0).accepts(f64::NAN));
        assert!(!Threshold::Below(1.0).accepts(f64::NAN));
    }

    #[test]
    fn report_serializes_thresholds() {
        let mut r = RunReport::new("x", &serde_json::json!({"a": 1}), 3).unwrap();
        r.check("p", 0.5, Threshold::Within([0.0, 1.0]));
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["properties"][0]["threshold"]["rule"], "within");
        assert_eq!(v["properties"][0]["passed"], true);
    }
}
