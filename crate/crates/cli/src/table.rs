//! Tabular CSV files with a JSON sidecar naming the target column.

use std::path::Path;

use feat::embed::{TabularDataset, Task};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Regression,
}

/// Which column holds the label and how to read it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub target: String,
    pub task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
}

impl Sidecar {
    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

/// A parsed table: feature column names and the dataset.
#[derive(Clone, Debug)]
pub struct Table {
    pub features: Vec<String>,
    pub dataset: TabularDataset,
}

fn parse_cell(field: &str, row: usize, column: &str) -> Result<Option<f64>, CliError> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| CliError::Usage(format!("row {row}, column {column}: `{field}` is not a finite number")))
}

/// Parse CSV text with a header row; empty fields are missing values and
/// rows with an empty target are queries.
pub fn parse_table(text: &str, sidecar: &Sidecar) -> Result<Table, CliError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Usage(format!("bad CSV header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let target = header.iter().position(|h| *h == sidecar.target).ok_or_else(|| CliError::Config {
        path: "sidecar".into(),
        message: format!("target column `{}` is not in the header", sidecar.target),
    })?;
    let features: Vec<String> = header.iter().enumerate().filter(|&(j, _)| j != target).map(|(_, h)| h.clone()).collect();
    let (mut x, mut observed, mut y, mut y_observed) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| CliError::Usage(format!("bad CSV record: {e}")))?;
        if record.len() != header.len() {
            return Err(CliError::Usage(format!("row {row} has {} fields, expected {}", record.len(), header.len())));
        }
        for (j, field) in record.iter().enumerate() {
            let v = parse_cell(field, row, &header[j])?;
            if j == target {
                y.push(v.unwrap_or(0.0));
                y_observed.push(v.is_some());
            } else {
                x.push(v.unwrap_or(0.0));
                observed.push(v.is_some());
            }
        }
    }
    let task = match sidecar.task {
        TaskKind::Regression => Task::Regression,
        TaskKind::Classification => {
            let inferred = y.iter().zip(&y_observed).filter(|p| *p.1).map(|p| *p.0 as usize + 1).max().unwrap_or(0).max(2);
            Task::Classification {
                classes: sidecar.classes.unwrap_or(inferred),
            }
        }
    };
    let rows = y.len();
    let dataset = TabularDataset::new(rows, features.len(), x, observed, y, y_observed, task)?;
    Ok(Table { features, dataset })
}

pub fn read_table(path: &Path, sidecar: &Sidecar) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_table(&text, sidecar)
}

fn field(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Serialize a dataset with the target as the last column named `target`.
pub fn table_csv(ds: &TabularDataset, features: &[String], target: &str) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let internal = |e: csv::Error| CliError::Internal(e.to_string());
    w.write_record(features.iter().map(String::as_str).chain([target])).map_err(internal)?;
    for r in 0..ds.rows() {
        let mut record: Vec<String> = (0..ds.cols()).map(|c| field(ds.value(r, c))).collect();
        record.push(field(ds.y_observed()[r].then(|| ds.y()[r])));
        w.write_record(&record).map_err(internal)?;
    }
    String::from_utf8(w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?).map_err(|e| CliError::Internal(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sidecar(task: TaskKind) -> Sidecar {
        Sidecar {
            target: "y".into(),
            task,
            classes: None,
        }
    }

    #[test]
    fn empty_fields_are_missing_and_empty_targets_are_queries() {
        let t = parse_table("a,y,b\n1,0,2\n,1,3.5\n4,,5\n", &sidecar(TaskKind::Classification)).unwrap();
        assert_eq!(t.features, vec!["a", "b"]);
        let ds = &t.dataset;
        assert_eq!((ds.rows(), ds.cols()), (3, 2));
        assert_eq!(ds.value(1, 0), None);
        assert_eq!(ds.value(1, 1), Some(3.5));
        assert_eq!(ds.query_rows(), vec![2]);
        assert_eq!(ds.task(), Task::Classification { classes: 2 });
    }

    #[test]
    fn round_trips_through_csv() {
        let t = parse_table("a,b,y\n1.5,,0.25\n-2,3,\n", &sidecar(TaskKind::Regression)).unwrap();
        let text = table_csv(&t.dataset, &t.features, "y").unwrap();
        assert_eq!(text, "a,b,y\n1.5,,0.25\n-2,3,\n");
    }

    #[test]
    fn rejects_bad_cells_and_unknown_targets() {
        assert!(matches!(parse_table("a,y\nx,1\n", &sidecar(TaskKind::Regression)), Err(CliError::Usage(_))));
        assert!(matches!(parse_table("a,y\nNaN,1\n", &sidecar(TaskKind::Regression)), Err(CliError::Usage(_))));
        let other = Sidecar {
            target: "z".into(),
            ..sidecar(TaskKind::Regression)
        };
        assert!(matches!(parse_table("a,y\n1,1\n", &other), Err(CliError::Config { .. })));
    }

    #[test]
    fn sidecar_requires_a_target() {
        let err = serde_json::from_str::<Sidecar>(r#"{"task": "regression"}"#).unwrap_err();
        assert!(err.to_string().contains("target"));
    }
}
