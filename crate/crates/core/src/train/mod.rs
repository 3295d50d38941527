//! Training objectives, masked-cell corruption and a small pre-training
//! loop over synthetic task streams.

mod losses;
mod optim;

use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::embed::{TabularDataset, Task};
use crate::error::{FeatError, Result};
use crate::model::{FeatModel, ModelConfig, PreparedInput};
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::gradcheck::{check_gradients, relative_error};
use crate::numerics::params::Bound;
use crate::numerics::random::RngStream;
use crate::numerics::tensor::Tensor;
use crate::scmgen::{gen_dataset, ScmGenConfig, TeacherKind};

pub use losses::{cross_entropy, huber_loss, total_loss, BatchTaskSets, LossReport, TaskOutputs, TaskTargets};
pub use optim::{Adam, AdamConfig};

const TRAIN_STREAM: u64 = 0x7a1;

/// A dataset with some observed cells hidden, and their original values.
#[derive(Clone, Debug)]
pub struct MaskedCells {
    pub dataset: TabularDataset,
    /// Hidden `(row, col)` cells in ascending order.
    pub cells: Vec<(usize, usize)>,
    /// Original value of each hidden cell.
    pub truth: Vec<f64>,
}

/// Hide `⌈rate · observed⌉` observed cells chosen uniformly at random.
pub fn ccmm_mask(ds: &TabularDataset, rate: f64, rng: &mut RngStream) -> Result<MaskedCells> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(FeatError::config("mask_rate", format!("must lie in (0, 1), got {rate}")));
    }
    let cols = ds.cols();
    let observed: Vec<usize> = (0..ds.rows() * cols).filter(|&i| ds.observed()[i]).collect();
    if observed.is_empty() {
        return Err(FeatError::Usage("no observed cells to mask".into()));
    }
    let count = ((rate * observed.len() as f64).ceil() as usize).clamp(1, observed.len());
    let mut picked: Vec<usize> = sample(rng, observed.len(), count).into_iter().map(|k| observed[k]).collect();
    picked.sort_unstable();
    let cells: Vec<(usize, usize)> = picked.iter().map(|&i| (i / cols, i % cols)).collect();
    let truth = picked.iter().map(|&i| ds.x()[i]).collect();
    Ok(MaskedCells {
        dataset: ds.with_masked_cells(&cells),
        cells,
        truth,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Share of rows whose labels are hidden and scored each step.
    pub query_fraction: f64,
    /// Share of observed cells hidden and reconstructed; 0 disables masking.
    pub mask_rate: f64,
    /// Huber transition point for regression and reconstruction.
    pub delta: f64,
    pub optimizer: AdamConfig,
    /// Consecutive non-finite steps tolerated before aborting.
    pub max_skips: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            query_fraction: 0.5,
            mask_rate: 0.15,
            delta: 1.0,
            optimizer: AdamConfig::default(),
            max_skips: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.query_fraction > 0.0 && self.query_fraction < 1.0) {
            return Err(FeatError::config("query_fraction", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(FeatError::config("mask_rate", "must lie in [0, 1)"));
        }
        if !(self.delta > 0.0) {
            return Err(FeatError::config("delta", "must be positive"));
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(FeatError::config("optimizer", "needs lr ≥ 0, betas in [0, 1), eps > 0"));
        }
        if self.max_skips == 0 {
            return Err(FeatError::config("max_skips", "must be at least 1"));
        }
        Ok(())
    }
}

/// One supervised episode: a prepared table plus what to score on it.
/// Targets and sets use prepared (context-first) positions.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub input: PreparedInput,
    pub targets: TaskTargets,
    pub sets: BatchTaskSets,
}

impl TrainingBatch {
    /// Hide the labels of `hidden` rows and the given masked cells, then
    /// score the hidden labels and the masked cells.
    pub fn new(ds: &TabularDataset, hidden: &[usize], masked: Option<&MaskedCells>, max_classes: usize) -> Result<Self> {
        let corrupted = masked.map_or(ds, |m| &m.dataset).with_hidden_labels(hidden);
        let input = PreparedInput::new(&corrupted, max_classes)?;
        let (n, cols) = (input.rows(), input.cols());
        let mut targets = TaskTargets {
            classes: vec![None; n],
            values: vec![None; n],
            cells: vec![None; n * cols],
            cols,
        };
        let mut sets = BatchTaskSets::default();
        for &r in hidden {
            let p = input.position_of(r).ok_or_else(|| FeatError::Contract(format!("row {r} vanished")))?;
            if !ds.y_observed()[r] {
                continue;
            }
            match input.task() {
                Task::Classification { .. } => {
                    targets.classes[p] = Some(ds.y()[r] as usize);
                    sets.cls.push(p);
                }
                Task::Regression => {
                    let s = input.label_scaling().expect("regression inputs carry label scaling");
                    targets.values[p] = Some(s.normalize(ds.y()[r]));
                    sets.reg.push(p);
                }
            }
        }
        if let Some(m) = masked {
            let scaling = input.column_scaling();
            for (&(r, c), &v) in m.cells.iter().zip(&m.truth) {
                let p = input.position_of(r).ok_or_else(|| FeatError::Contract(format!("row {r} vanished")))?;
                targets.cells[p * cols + c] = Some((v - scaling.mean[c]) / scaling.scale[c]);
                sets.mask.push((p, c));
            }
        }
        sets.cls.sort_unstable();
        sets.reg.sort_unstable();
        sets.mask.sort_unstable();
        Ok(TrainingBatch { input, targets, sets })
    }

    /// Hide a random `fraction` of rows' labels and, when `mask_rate > 0`,
    /// a random share of observed cells.
    pub fn sample(ds: &TabularDataset, fraction: f64, mask_rate: f64, max_classes: usize, rng: &mut RngStream) -> Result<Self> {
        let labeled = ds.context_rows();
        if labeled.len() < 2 {
            return Err(FeatError::Usage("need at least two labeled rows to split context and queries".into()));
        }
        let k = ((fraction * labeled.len() as f64).round() as usize).clamp(1, labeled.len() - 1);
        let hidden: Vec<usize> = sample(rng, labeled.len(), k).into_iter().map(|i| labeled[i]).collect();
        let masked = if mask_rate > 0.0 { Some(ccmm_mask(ds, mask_rate, rng)?) } else { None };
        Self::new(ds, &hidden, masked.as_ref(), max_classes)
    }

    /// Differentiable objective of this batch under bound parameters.
    pub fn loss(&self, model: &FeatModel, b: &Bound, rng: &mut RngStream, delta: f64) -> Result<(Var, LossReport)> {
        let basis = model.identity_basis(self.input.cols(), rng)?;
        let out = model.forward(b, &self.input, &basis, !self.sets.mask.is_empty())?;
        let outputs = TaskOutputs {
            logits: out.logits.as_ref(),
            regression: out.regression.as_ref(),
            imputation: out.imputation.as_ref(),
        };
        total_loss(outputs, &self.targets, &self.sets, delta)
    }
}

/// Per-step losses; absent terms serialize as empty fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub total: f64,
    pub cls: Option<f64>,
    pub reg: Option<f64>,
    pub mask: Option<f64>,
    /// Pre-clip global gradient norm; NaN for skipped steps.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    /// Steps whose loss or gradient was non-finite and left parameters untouched.
    pub skipped: Vec<usize>,
}

impl TrainOutcome {
    /// Mean total loss over 1-based steps `first..=last`, skipping
    /// non-finite entries.
    pub fn mean_total(&self, first: usize, last: usize) -> f64 {
        let v: Vec<f64> = self
            .records
            .iter()
            .filter(|r| (first..=last).contains(&r.step) && r.total.is_finite())
            .map(|r| r.total)
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Write the loss curve as CSV with columns
/// `step,total,cls,reg,mask,grad_norm`.
pub fn write_loss_csv<W: Write>(records: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_loss_csv(records: &[StepRecord], path: &Path) -> Result<()> {
    write_loss_csv(records, std::fs::File::create(path)?)
}

/// Optimize `model` on one dataset per step drawn from `source(step)`.
/// Non-finite steps are skipped; `max_skips` in a row abort the run.
pub fn train<S>(model: &mut FeatModel, cfg: &TrainConfig, mut source: S) -> Result<TrainOutcome>
where
    S: FnMut(usize) -> Result<TabularDataset>,
{
    cfg.validate()?;
    let mut rng = RngStream::new(cfg.seed, TRAIN_STREAM);
    let mut adam = Adam::new(model.params(), cfg.optimizer);
    let max_classes = model.config().max_classes;
    let mut outcome = TrainOutcome {
        records: Vec::with_capacity(cfg.steps),
        skipped: Vec::new(),
    };
    let mut streak = 0;
    for step in 1..=cfg.steps {
        let ds = source(step)?;
        let batch = TrainingBatch::sample(&ds, cfg.query_fraction, cfg.mask_rate, max_classes, &mut rng)?;
        let tape = Tape::new();
        let b = model.params().bind_on(&tape);
        let (loss, report) = batch.loss(model, &b, &mut rng, cfg.delta)?;
        let grads = tape.backward(&loss)?;
        let grads: Vec<Tensor> = b.vars().iter().map(|v| grads.get_or_zeros(v)).collect();
        drop(loss);
        drop(b);
        let finite = report.total.is_finite() && grads.iter().all(Tensor::is_finite);
        let grad_norm = if finite {
            streak = 0;
            adam.update(model.params_mut(), &grads)?
        } else {
            streak += 1;
            outcome.skipped.push(step);
            if streak >= cfg.max_skips {
                return Err(FeatError::Diverged(format!(
                    "{streak} consecutive non-finite steps ending at step {step} (last loss {:?})",
                    report
                )));
            }
            f64::NAN
        };
        outcome.records.push(StepRecord {
            step,
            total: report.total,
            cls: report.cls,
            reg: report.reg,
            mask: report.mask,
            grad_norm,
        });
    }
    Ok(outcome)
}

/// Train a fresh model on the synthetic stream whose step `s` uses
/// generator seed `gen_cfg.seed + s`.
pub fn train_toy(model_cfg: &ModelConfig, gen_cfg: &ScmGenConfig, cfg: &TrainConfig) -> Result<(FeatModel, TrainOutcome)> {
    gen_cfg.validate()?;
    let mut model = FeatModel::new(model_cfg.clone())?;
    let outcome = train(&mut model, cfg, |step| {
        let mut g = gen_cfg.clone();
        g.seed = gen_cfg.seed.wrapping_add(step as u64);
        Ok(gen_dataset(&g)?.dataset)
    })?;
    Ok((model, outcome))
}

/// Relative error of one parameter group, norm-wise over all its entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupGradError {
    pub group: String,
    pub params: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

/// Compare autodiff gradients of the summed batch objectives against
/// central differences with step `h`, per parameter group.
pub fn gradcheck_groups(model: &FeatModel, batches: &[TrainingBatch], delta: f64, h: f64) -> Result<Vec<GroupGradError>> {
    let seed = model.config().seed;
    let objective = |vars: &[Var]| -> Result<Var> {
        let b = Bound::from_vars(vars.to_vec());
        let mut rng = RngStream::new(seed, TRAIN_STREAM);
        let mut total: Option<Var> = None;
        for batch in batches {
            let (l, _) = batch.loss(model, &b, &mut rng, delta)?;
            total = Some(match total {
                Some(t) => t.add(&l)?,
                None => l,
            });
        }
        total.ok_or_else(|| FeatError::Usage("no batches".into()))
    };
    let report = check_gradients(objective, &model.params().tensors(), h)?;
    Ok(model
        .param_groups()
        .into_iter()
        .map(|(group, ids)| {
            let flat = |ts: &[Tensor]| -> Vec<f64> { ids.iter().flat_map(|id| ts[id.index()].data().to_vec()).collect() };
            let (a, n) = (flat(&report.analytic), flat(&report.numeric));
            GroupGradError {
                params: a.len(),
                analytic_norm: a.iter().map(|v| v * v).sum::<f64>().sqrt(),
                rel_error: relative_error(&a, &n),
                group,
            }
        })
        .collect())
}

/// End-to-end check on the tiny configuration: one classification and one
/// regression table of 6 rows and 3 columns, each with hidden labels and
/// masked cells.
pub fn gradcheck_tiny(seed: u64) -> Result<Vec<GroupGradError>> {
    let mut model_cfg = ModelConfig::tiny();
    model_cfg.seed = seed;
    let model = FeatModel::new(model_cfg)?;
    let mut rng = RngStream::new(seed, TRAIN_STREAM ^ 1);
    let mut batches = Vec::new();
    for (k, task) in [Task::Classification { classes: 2 }, Task::Regression].into_iter().enumerate() {
        let gen = ScmGenConfig {
            features: 3,
            roots: 2,
            rows: 6,
            task,
            teacher: TeacherKind::Linear,
            seed: seed.wrapping_add(k as u64),
            ..ScmGenConfig::default()
        };
        let ds = gen_dataset(&gen)?.dataset;
        batches.push(TrainingBatch::sample(&ds, 0.5, 0.2, model.config().max_classes, &mut rng)?);
    }
    gradcheck_groups(&model, &batches, 1.0, 1e-5)
}

/// Classification accuracy on the hidden query rows of `ds` and the share
/// of the most frequent context class.
pub fn accuracy_vs_majority(model: &FeatModel, ds: &TabularDataset, truth: &[usize], rng: &mut RngStream) -> Result<(f64, f64)> {
    let classes = ds
        .task()
        .classes()
        .ok_or_else(|| FeatError::Usage("accuracy needs a classification task".into()))?;
    let pred = model.predict(ds, rng, Default::default())?;
    let got = pred.classes().unwrap_or_default();
    let queries = pred.query_rows;
    if queries.is_empty() {
        return Err(FeatError::Usage("no query rows".into()));
    }
    let correct = queries.iter().zip(&got).filter(|&(&r, &c)| truth[r] == c).count();
    let mut counts = vec![0usize; classes];
    for r in ds.context_rows() {
        counts[ds.y()[r] as usize] += 1;
    }
    let majority = counts.iter().enumerate().max_by_key(|&(c, n)| (*n, std::cmp::Reverse(c))).map_or(0, |p| p.0);
    let base = queries.iter().filter(|&&r| truth[r] == majority).count();
    let n = queries.len() as f64;
    Ok((correct as f64 / n, base as f64 / n))
}

/// Draw `fraction` of the rows of `ds` as hidden queries.
pub fn hide_random_labels(ds: &TabularDataset, fraction: f64, rng: &mut RngStream) -> TabularDataset {
    let rows = ds.rows();
    let k = ((fraction * rows as f64).round() as usize).clamp(1, rows.saturating_sub(1).max(1));
    let hidden: Vec<usize> = sample(rng, rows, k).into_vec();
    ds.with_hidden_labels(&hidden)
}
