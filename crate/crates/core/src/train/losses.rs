use serde::{Deserialize, Serialize};

use crate::error::{FeatError, Result};
use crate::numerics::activations::huber;
use crate::numerics::autograd::{log_sum_exp, Var};
use crate::numerics::tensor::Tensor;

/// Huber penalty of `pred − target`.
pub fn huber_loss(pred: f64, target: f64, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(FeatError::config("delta", format!("must be positive, got {delta}")));
    }
    Ok(huber(pred - target, delta))
}

/// `−log softmax(logits)[class]`.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(FeatError::Input(format!("class {class} of {}", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[class])
}

/// Rows and cells that carry a supervised signal in one step.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchTaskSets {
    /// Rows scored by cross-entropy.
    pub cls: Vec<usize>,
    /// Rows scored by the Huber regression loss.
    pub reg: Vec<usize>,
    /// Masked `(row, col)` cells scored by the Huber reconstruction loss.
    pub mask: Vec<(usize, usize)>,
}

/// Ground truth aligned with the prediction rows; `None` marks a missing
/// value, which is excluded before any arithmetic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskTargets {
    pub classes: Vec<Option<usize>>,
    pub values: Vec<Option<f64>>,
    /// Row-major `[N, D]` cell truths.
    pub cells: Vec<Option<f64>>,
    pub cols: usize,
}

/// Differentiable predictions: logits `[N, C]`, regression `[N]`,
/// reconstructions `[N, D]`.
#[derive(Clone, Copy, Default)]
pub struct TaskOutputs<'a> {
    pub logits: Option<&'a Var>,
    pub regression: Option<&'a Var>,
    pub imputation: Option<&'a Var>,
}

/// Value of each active term; absent terms were switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub cls: Option<f64>,
    pub reg: Option<f64>,
    pub mask: Option<f64>,
}

fn mean_huber(pred: &Var, targets: Vec<f64>, delta: f64) -> Result<Var> {
    let n = targets.len();
    let t = Var::constant(Tensor::new(vec![n], targets)?);
    pred.sub(&t)?.huber(delta)?.sum()?.scale(1.0 / n as f64)
}

/// Sum of the active mean losses. A term is active when its set still has
/// members after dropping entries without ground truth; each term averages
/// over its own members only.
pub fn total_loss(outputs: TaskOutputs<'_>, targets: &TaskTargets, sets: &BatchTaskSets, delta: f64) -> Result<(Var, LossReport)> {
    if !(delta > 0.0) {
        return Err(FeatError::config("delta", format!("must be positive, got {delta}")));
    }
    let mut terms: Vec<Var> = Vec::new();
    let mut report = LossReport::default();

    let cls: Vec<(usize, usize)> = sets
        .cls
        .iter()
        .filter_map(|&r| targets.classes.get(r).copied().flatten().map(|c| (r, c)))
        .collect();
    if !cls.is_empty() {
        let logits = outputs.logits.ok_or_else(|| FeatError::Contract("classification rows without logits".into()))?;
        let c = logits.shape()[1];
        let rows: Vec<usize> = cls.iter().map(|p| p.0).collect();
        let mut onehot = Tensor::zeros(&[rows.len(), c]);
        for (k, &(_, class)) in cls.iter().enumerate() {
            if class >= c {
                return Err(FeatError::Input(format!("class {class} for {c} logits")));
            }
            onehot.set(&[k, class], 1.0);
        }
        let term = logits
            .index_select(0, &rows)?
            .log_softmax()?
            .mul(&Var::constant(onehot))?
            .sum()?
            .scale(-1.0 / rows.len() as f64)?;
        report.cls = Some(term.value().item()?);
        terms.push(term);
    }

    let reg: Vec<(usize, f64)> = sets
        .reg
        .iter()
        .filter_map(|&r| targets.values.get(r).copied().flatten().map(|v| (r, v)))
        .collect();
    if !reg.is_empty() {
        let pred = outputs.regression.ok_or_else(|| FeatError::Contract("regression rows without predictions".into()))?;
        let rows: Vec<usize> = reg.iter().map(|p| p.0).collect();
        let term = mean_huber(&pred.index_select(0, &rows)?, reg.iter().map(|p| p.1).collect(), delta)?;
        report.reg = Some(term.value().item()?);
        terms.push(term);
    }

    let cols = targets.cols;
    let mask: Vec<(usize, f64)> = sets
        .mask
        .iter()
        .filter_map(|&(r, c)| targets.cells.get(r * cols + c).copied().flatten().map(|v| (r * cols + c, v)))
        .collect();
    if !mask.is_empty() {
        let pred = outputs.imputation.ok_or_else(|| FeatError::Contract("masked cells without reconstructions".into()))?;
        let flat = pred.reshape(&[pred.value().numel()])?;
        let idx: Vec<usize> = mask.iter().map(|p| p.0).collect();
        let term = mean_huber(&flat.index_select(0, &idx)?, mask.iter().map(|p| p.1).collect(), delta)?;
        report.mask = Some(term.value().item()?);
        terms.push(term);
    }

    let mut it = terms.into_iter();
    let mut total = it
        .next()
        .ok_or_else(|| FeatError::Usage("no classification, regression or masked targets in this batch".into()))?;
    for t in it {
        total = total.add(&t)?;
    }
    report.total = total.value().item()?;
    Ok((total, report))
}
