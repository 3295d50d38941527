//! In-memory tabular datasets split into labeled context and query rows.

use serde::{Deserialize, Serialize};

use crate::error::{FeatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    pub fn classes(self) -> Option<usize> {
        match self {
            Task::Classification { classes } => Some(classes),
            Task::Regression => None,
        }
    }
}

/// `N × D` feature matrix with per-cell observation flags and a label
/// column. Rows whose label is observed form the context set.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularDataset {
    rows: usize,
    cols: usize,
    x: Vec<f64>,
    observed: Vec<bool>,
    y: Vec<f64>,
    y_observed: Vec<bool>,
    task: Task,
}

impl TabularDataset {
    /// Validates shapes, finiteness of observed values and class indices.
    pub fn new(
        rows: usize,
        cols: usize,
        x: Vec<f64>,
        observed: Vec<bool>,
        y: Vec<f64>,
        y_observed: Vec<bool>,
        task: Task,
    ) -> Result<Self> {
        if x.len() != rows * cols || observed.len() != rows * cols {
            return Err(FeatError::Dimension(format!(
                "{rows}×{cols} dataset with {} values and {} flags",
                x.len(),
                observed.len()
            )));
        }
        if y.len() != rows || y_observed.len() != rows {
            return Err(FeatError::Dimension(format!(
                "{rows} rows but {} labels and {} label flags",
                y.len(),
                y_observed.len()
            )));
        }
        if let Some(i) = (0..rows * cols).find(|&i| observed[i] && !x[i].is_finite()) {
            return Err(FeatError::Input(format!(
                "observed cell ({}, {}) is not finite",
                i / cols,
                i % cols
            )));
        }
        for i in 0..rows {
            if !y_observed[i] {
                continue;
            }
            if !y[i].is_finite() {
                return Err(FeatError::Input(format!("label of row {i} is not finite")));
            }
            if let Task::Classification { classes } = task {
                let c = y[i];
                if c < 0.0 || c.fract() != 0.0 || c >= classes as f64 {
                    return Err(FeatError::Input(format!(
                        "label {c} of row {i} is not a class index below {classes}"
                    )));
                }
            }
        }
        if let Task::Classification { classes } = task {
            if classes < 2 {
                return Err(FeatError::Input(format!("need at least 2 classes, got {classes}")));
            }
        }
        Ok(TabularDataset {
            rows,
            cols,
            x,
            observed,
            y,
            y_observed,
            task,
        })
    }

    /// Fully observed features; rows with `Some` label are context rows.
    pub fn from_dense(rows: usize, cols: usize, x: Vec<f64>, y: Vec<Option<f64>>, task: Task) -> Result<Self> {
        let observed = vec![true; x.len()];
        let y_observed = y.iter().map(Option::is_some).collect();
        let y = y.into_iter().map(|v| v.unwrap_or(0.0)).collect();
        Self::new(rows, cols, x, observed, y, y_observed, task)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn y_observed(&self) -> &[bool] {
        &self.y_observed
    }

    pub fn value(&self, row: usize, col: usize) -> Option<f64> {
        let i = row * self.cols + col;
        self.observed[i].then(|| self.x[i])
    }

    pub fn context_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&i| self.y_observed[i]).collect()
    }

    pub fn query_rows(&self) -> Vec<usize> {
        (0..self.rows).filter(|&i| !self.y_observed[i]).collect()
    }

    /// Copy with the given cells marked missing.
    pub fn with_masked_cells(&self, cells: &[(usize, usize)]) -> Self {
        let mut out = self.clone();
        for &(r, c) in cells {
            out.observed[r * self.cols + c] = false;
        }
        out
    }

    /// Copy with the given rows' labels hidden.
    pub fn with_hidden_labels(&self, rows: &[usize]) -> Self {
        let mut out = self.clone();
        for &r in rows {
            out.y_observed[r] = false;
        }
        out
    }

    /// Rows reordered so that row `k` of the result is row `order[k]`.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.rows];
        if order.len() != self.rows || order.iter().any(|&r| r >= self.rows || std::mem::replace(&mut seen[r], true)) {
            return Err(FeatError::Dimension("row order is not a permutation".into()));
        }
        let d = self.cols;
        let mut x = Vec::with_capacity(self.x.len());
        let mut observed = Vec::with_capacity(self.x.len());
        for &r in order {
            x.extend_from_slice(&self.x[r * d..(r + 1) * d]);
            observed.extend_from_slice(&self.observed[r * d..(r + 1) * d]);
        }
        Ok(TabularDataset {
            rows: self.rows,
            cols: d,
            x,
            observed,
            y: order.iter().map(|&r| self.y[r]).collect(),
            y_observed: order.iter().map(|&r| self.y_observed[r]).collect(),
            task: self.task,
        })
    }

    /// Columns reordered so that column `k` of the result is column `order[k]`.
    pub fn permute_cols(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.cols];
        if order.len() != self.cols || order.iter().any(|&c| c >= self.cols || std::mem::replace(&mut seen[c], true)) {
            return Err(FeatError::Dimension("column order is not a permutation".into()));
        }
        let d = self.cols;
        let mut out = self.clone();
        for r in 0..self.rows {
            for (k, &c) in order.iter().enumerate() {
                out.x[r * d + k] = self.x[r * d + c];
                out.observed[r * d + k] = self.observed[r * d + c];
            }
        }
        Ok(out)
    }
}

/// Per-column location and scale estimated from context rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ColumnScaling {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl ColumnScaling {
    /// Mean and standard deviation of the observed context cells of each
    /// column. Columns with fewer than two such cells, or zero spread, get
    /// scale 1.
    pub fn fit(ds: &TabularDataset) -> Self {
        let d = ds.cols();
        let mut mean = vec![0.0; d];
        let mut scale = vec![1.0; d];
        let ctx = ds.context_rows();
        for j in 0..d {
            let vals: Vec<f64> = ctx.iter().filter_map(|&i| ds.value(i, j)).collect();
            if vals.is_empty() {
                continue;
            }
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            mean[j] = m;
            if vals.len() >= 2 {
                let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                if var > 0.0 {
                    scale[j] = var.sqrt();
                }
            }
        }
        ColumnScaling { mean, scale }
    }

    /// Standardized copy of `x` (row-major, `D` columns); unobserved cells
    /// are set to zero.
    pub fn apply(&self, x: &[f64], observed: &[bool]) -> Vec<f64> {
        let d = self.mean.len();
        x.iter()
            .zip(observed)
            .enumerate()
            .map(|(i, (&v, &o))| if o { (v - self.mean[i % d]) / self.scale[i % d] } else { 0.0 })
            .collect()
    }
}

/// Location and scale of context labels for regression.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelScaling {
    pub mean: f64,
    pub scale: f64,
}

impl LabelScaling {
    pub fn fit(ds: &TabularDataset) -> Self {
        let vals: Vec<f64> = ds.context_rows().iter().map(|&i| ds.y()[i]).collect();
        if vals.is_empty() {
            return LabelScaling { mean: 0.0, scale: 1.0 };
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
        LabelScaling { mean, scale }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }
}
