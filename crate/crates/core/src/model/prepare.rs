use crate::embed::{ColumnScaling, LabelScaling, TabularDataset, Task};
use crate::error::{FeatError, Result};

/// A dataset reordered context-first and standardized with context-row
/// statistics, ready to embed.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    /// `order[p]` is the original row at position `p`.
    order: Vec<usize>,
    context: usize,
    cols: usize,
    values: Vec<f64>,
    observed: Vec<bool>,
    labels: Vec<f64>,
    label_observed: Vec<bool>,
    task: Task,
    columns: ColumnScaling,
    label_scaling: Option<LabelScaling>,
}

impl PreparedInput {
    pub fn new(ds: &TabularDataset, max_classes: usize) -> Result<Self> {
        let context_rows = ds.context_rows();
        if context_rows.is_empty() {
            return Err(FeatError::Usage("dataset has no context rows (no observed labels)".into()));
        }
        if let Task::Classification { classes } = ds.task() {
            if classes > max_classes {
                return Err(FeatError::config(
                    "max_classes",
                    format!("task has {classes} classes, the model supports {max_classes}"),
                ));
            }
        }
        let mut order = context_rows;
        let context = order.len();
        order.extend(ds.query_rows());
        let cols = ds.cols();
        let columns = ColumnScaling::fit(ds);
        let scaled = columns.apply(ds.x(), ds.observed());
        let mut values = Vec::with_capacity(scaled.len());
        let mut observed = Vec::with_capacity(scaled.len());
        for &r in &order {
            values.extend_from_slice(&scaled[r * cols..(r + 1) * cols]);
            observed.extend_from_slice(&ds.observed()[r * cols..(r + 1) * cols]);
        }
        let label_scaling = match ds.task() {
            Task::Regression => Some(LabelScaling::fit(ds)),
            Task::Classification { .. } => None,
        };
        let label_observed: Vec<bool> = order.iter().map(|&r| ds.y_observed()[r]).collect();
        let labels = order
            .iter()
            .zip(&label_observed)
            .map(|(&r, &o)| match (o, label_scaling) {
                (false, _) => 0.0,
                (true, Some(s)) => s.normalize(ds.y()[r]),
                (true, None) => ds.y()[r],
            })
            .collect();
        Ok(PreparedInput {
            order,
            context,
            cols,
            values,
            observed,
            labels,
            label_observed,
            task: ds.task(),
            columns,
            label_scaling,
        })
    }

    pub fn rows(&self) -> usize {
        self.order.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn context_len(&self) -> usize {
        self.context
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Positions (after reordering) of the query rows.
    pub fn query_positions(&self) -> std::ops::Range<usize> {
        self.context..self.order.len()
    }

    /// Position of original row `row`.
    pub fn position_of(&self, row: usize) -> Option<usize> {
        self.order.iter().position(|&r| r == row)
    }

    /// Standardized values, row-major by position.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    /// Label-token inputs: class index, or the standardized target.
    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    pub fn label_observed(&self) -> &[bool] {
        &self.label_observed
    }

    pub fn column_scaling(&self) -> &ColumnScaling {
        &self.columns
    }

    pub fn label_scaling(&self) -> Option<LabelScaling> {
        self.label_scaling
    }
}
