//! The full encoder: embedding, stacked dual-axis blocks and task heads,
//! plus the analytic FLOP counter and checkpoint format.

mod checkpoint;
mod config;
mod flops;
mod prepare;

pub use checkpoint::{load, load_expecting, save, Checkpoint, CHECKPOINT_VERSION, MAGIC};
pub use config::ModelConfig;
pub use flops::{flop_count, FlopBreakdown};
pub use prepare::PreparedInput;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{append_label_token, draw_identity_basis, Embedding, IdentityBasis, TabularDataset, Task};
use crate::error::{FeatError, Result};
use crate::featureaxis::FeatureBlock;
use crate::numerics::autograd::Var;
use crate::numerics::params::{glorot, Bound, ParamId, ParamSet};
use crate::numerics::random::RngStream;
use crate::numerics::tensor::Tensor;
use crate::sampleaxis::SampleAxisBlock;

const LN_EPS: f64 = 1e-5;
const INIT_STREAM: u64 = 0x1417;
const SDFE_STREAM: u64 = 0x5dfe;

/// Two-layer head with a bounded hidden layer: `W₂·GELU(LN(W₁·z))`.
#[derive(Clone, Debug)]
struct BoundedHead {
    w1: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
    w2: ParamId,
}

impl BoundedHead {
    fn new(params: &mut ParamSet, prefix: &str, d: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        Ok(BoundedHead {
            w1: params.add(format!("{prefix}.w1"), glorot(&[d, hidden], d, hidden, rng))?,
            ln_gain: params.add(format!("{prefix}.ln.gain"), Tensor::ones(&[hidden]))?,
            ln_bias: params.add(format!("{prefix}.ln.bias"), Tensor::zeros(&[hidden]))?,
            w2: params.add(format!("{prefix}.w2"), glorot(&[hidden, 1], hidden, 1, rng))?,
        })
    }

    /// `z` is `[n, d]`; the result is `[n]`.
    fn forward(&self, b: &Bound, z: &Var) -> Result<Var> {
        let n = z.shape()[0];
        z.matmul(&b[self.w1])?
            .layer_norm(&b[self.ln_gain], &b[self.ln_bias], LN_EPS)?
            .gelu()?
            .matmul(&b[self.w2])?
            .reshape(&[n])
    }
}

#[derive(Clone, Debug)]
struct DualAxisBlock {
    features: Vec<FeatureBlock>,
    samples: Option<SampleAxisBlock>,
}

/// Differentiable outputs of one forward pass, in prepared (context-first)
/// row order.
pub struct ForwardOutput {
    /// `[N, D+1, d]`.
    pub cells: Var,
    /// `[N, C]` for classification tasks.
    pub logits: Option<Var>,
    /// `[N]` standardized targets for regression tasks.
    pub regression: Option<Var>,
    /// `[N, D]` standardized cell reconstructions, when requested.
    pub imputation: Option<Var>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Rows per feature-axis work unit.
    pub chunk_rows: usize,
    /// Reconstruct unobserved cells.
    pub impute: bool,
}

impl Default for PredictOptions {
    fn default() -> Self {
        PredictOptions {
            chunk_rows: 256,
            impute: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImputedCell {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// Predictions for the query rows of one dataset, in original row order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub query_rows: Vec<usize>,
    /// Per-row class probabilities.
    pub probabilities: Option<Vec<Vec<f64>>>,
    /// Per-row regression estimates in label units.
    pub regression: Option<Vec<f64>>,
    pub imputed: Vec<ImputedCell>,
    /// False when column identities fell back to near-orthogonal rows.
    pub identities_orthonormal: bool,
}

impl Prediction {
    /// Most probable class per query row.
    pub fn classes(&self) -> Option<Vec<usize>> {
        self.probabilities.as_ref().map(|ps| {
            ps.iter()
                .map(|p| {
                    p.iter()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |best, (c, &v)| if v > best.1 { (c, v) } else { best })
                        .0
                })
                .collect()
        })
    }
}

/// The encoder with its parameters.
#[derive(Clone, Debug)]
pub struct FeatModel {
    config: ModelConfig,
    params: ParamSet,
    embedding: Embedding,
    blocks: Vec<DualAxisBlock>,
    cls_w1: ParamId,
    cls_w2: ParamId,
    regression: BoundedHead,
    imputation: BoundedHead,
}

impl FeatModel {
    /// Fresh model; initialization is a function of `config.seed` only.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(config.seed, INIT_STREAM);
        let mut params = ParamSet::new();
        let (d, h) = (config.d, config.d_hidden);
        let embedding = Embedding::new(&mut params, d, h, &mut rng)?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let features = (0..config.feature_subblocks)
                .map(|s| FeatureBlock::new(&mut params, &format!("block{l}.feature{s}"), d, config.d_ff, config.heads, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let samples = if config.sample_axis {
                Some(SampleAxisBlock::new(&mut params, &format!("block{l}.sample"), config.sample_axis_options(), &mut rng)?)
            } else {
                None
            };
            blocks.push(DualAxisBlock { features, samples });
        }
        let cls_w1 = params.add("head.cls.w1", glorot(&[d, h], d, h, &mut rng))?;
        let cls_w2 = params.add("head.cls.w2", glorot(&[h, config.max_classes], h, config.max_classes, &mut rng))?;
        let regression = BoundedHead::new(&mut params, "head.reg", d, h, &mut rng)?;
        let imputation = BoundedHead::new(&mut params, "head.impute", d, h, &mut rng)?;
        Ok(FeatModel {
            config,
            params,
            embedding,
            blocks,
            cls_w1,
            cls_w2,
            regression,
            imputation,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Parameters grouped by component: `embed`, `block{l}.feature{s}`,
    /// `block{l}.sample`, `head.cls`, `head.reg`, `head.impute`.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups: Vec<(String, Vec<ParamId>)> = Vec::new();
        for id in self.params.ids() {
            let name = self.params.name(id);
            let key = if name.starts_with("embed.") {
                "embed".to_string()
            } else {
                name.split('.').take(2).collect::<Vec<_>>().join(".")
            };
            match groups.iter_mut().find(|(k, _)| *k == key) {
                Some((_, ids)) => ids.push(id),
                None => groups.push((key, vec![id])),
            }
        }
        groups
    }

    /// Column identities for one pass: the seeded draw when frozen, a fresh
    /// draw from `rng` otherwise.
    pub fn identity_basis(&self, cols: usize, rng: &mut RngStream) -> Result<IdentityBasis> {
        if self.config.freeze_sdfe {
            let mut fixed = RngStream::new(self.config.seed, SDFE_STREAM);
            draw_identity_basis(cols, self.config.d, self.config.sdfe_strict, &mut fixed)
        } else {
            draw_identity_basis(cols, self.config.d, self.config.sdfe_strict, rng)
        }
    }

    fn embed_rows(&self, b: &Bound, input: &PreparedInput, loc: &Var, start: usize, rows: usize) -> Result<Var> {
        let cols = input.cols();
        let span = start * cols..(start + rows) * cols;
        let cells = self
            .embedding
            .assemble_cells(b, &input.values()[span.clone()], &input.observed()[span], loc)?;
        let labels = start..start + rows;
        let tokens = self
            .embedding
            .label_tokens(b, &input.labels()[labels.clone()], &input.label_observed()[labels])?;
        append_label_token(&cells, &tokens)
    }

    /// Contextualized cells `[N, D+1, d]` in one differentiable graph.
    pub fn encode(&self, b: &Bound, input: &PreparedInput, basis: &IdentityBasis) -> Result<Var> {
        let loc = self.embedding.identifiers(b, basis)?;
        let mut h = self.embed_rows(b, input, &loc, 0, input.rows())?;
        for block in &self.blocks {
            for f in &block.features {
                h = f.forward(b, &h)?;
            }
            if let Some(s) = &block.samples {
                h = s.forward(b, &h)?;
            }
        }
        Ok(h)
    }

    /// Same result as [`encode`](Self::encode) without recording a graph:
    /// feature-axis work runs over row chunks and sample-axis work over
    /// columns, in place on one `N × (D+1) × d` buffer.
    pub fn encode_streaming(&self, input: &PreparedInput, basis: &IdentityBasis, chunk_rows: usize) -> Result<Tensor> {
        let (n, t, d) = (input.rows(), input.cols() + 1, self.config.d);
        let row_len = t * d;
        let chunk_rows = chunk_rows.max(1);
        let loc = self.embedding.identifiers(&self.params.bind_constant(), basis)?.value().clone();
        let mut buf = vec![0.0; n * row_len];
        for (l, block) in self.blocks.iter().enumerate() {
            buf.par_chunks_mut(chunk_rows * row_len)
                .enumerate()
                .try_for_each(|(c, out)| -> Result<()> {
                    let b = self.params.bind_constant();
                    let rows = out.len() / row_len;
                    let mut h = if l == 0 {
                        self.embed_rows(&b, input, &Var::constant(loc.clone()), c * chunk_rows, rows)?
                    } else {
                        Var::constant(Tensor::new(vec![rows, t, d], out.to_vec())?)
                    };
                    for f in &block.features {
                        h = f.forward(&b, &h)?;
                    }
                    out.copy_from_slice(h.value().data());
                    Ok(())
                })?;
            let Some(samples) = &block.samples else { continue };
            let columns: Vec<usize> = (0..t).collect();
            for group in columns.chunks(rayon::current_num_threads().max(1)) {
                let results = group
                    .par_iter()
                    .map(|&j| -> Result<Vec<f64>> {
                        let b = self.params.bind_constant();
                        let mut col = Vec::with_capacity(n * d);
                        for i in 0..n {
                            col.extend_from_slice(&buf[i * row_len + j * d..i * row_len + (j + 1) * d]);
                        }
                        let x = Var::constant(Tensor::new(vec![n, 1, d], col)?);
                        Ok(samples.forward(&b, &x)?.value().data().to_vec())
                    })
                    .collect::<Result<Vec<_>>>()?;
                for (&j, col) in group.iter().zip(results) {
                    for i in 0..n {
                        buf[i * row_len + j * d..i * row_len + (j + 1) * d].copy_from_slice(&col[i * d..(i + 1) * d]);
                    }
                }
            }
        }
        Tensor::new(vec![n, t, d], buf)
    }

    /// Target states `[N, d]`: the label column of the final cells.
    pub fn target_states(&self, cells: &Var) -> Result<Var> {
        let (n, t, d) = dims(cells)?;
        cells.narrow(1, t - 1, 1)?.reshape(&[n, d])
    }

    /// Feature states `[N·D, d]`, row-major over cells.
    pub fn feature_states(&self, cells: &Var) -> Result<Var> {
        let (n, t, d) = dims(cells)?;
        cells.narrow(1, 0, t - 1)?.reshape(&[n * (t - 1), d])
    }

    /// Class logits `[n, classes]` from target states `[n, d]`.
    pub fn class_logits(&self, b: &Bound, z: &Var, classes: usize) -> Result<Var> {
        if classes < 2 || classes > self.config.max_classes {
            return Err(FeatError::config(
                "max_classes",
                format!("{classes} classes requested from a head of width {}", self.config.max_classes),
            ));
        }
        z.matmul(&b[self.cls_w1])?
            .gelu()?
            .matmul(&b[self.cls_w2])?
            .narrow(1, 0, classes)
    }

    /// Standardized regression estimates `[n]`.
    pub fn regression_head(&self, b: &Bound, z: &Var) -> Result<Var> {
        self.regression.forward(b, z)
    }

    /// Standardized cell reconstructions `[m]` from feature states `[m, d]`.
    pub fn imputation_head(&self, b: &Bound, z: &Var) -> Result<Var> {
        self.imputation.forward(b, z)
    }

    /// Full differentiable forward pass.
    pub fn forward(&self, b: &Bound, input: &PreparedInput, basis: &IdentityBasis, with_imputation: bool) -> Result<ForwardOutput> {
        let cells = self.encode(b, input, basis)?;
        let z = self.target_states(&cells)?;
        let (logits, regression) = match input.task() {
            Task::Classification { classes } => (Some(self.class_logits(b, &z, classes)?), None),
            Task::Regression => (None, Some(self.regression_head(b, &z)?)),
        };
        let imputation = if with_imputation {
            let n = input.rows();
            Some(self.imputation_head(b, &self.feature_states(&cells)?)?.reshape(&[n, input.cols()])?)
        } else {
            None
        };
        Ok(ForwardOutput {
            cells,
            logits,
            regression,
            imputation,
        })
    }

    /// In-context prediction for every row without an observed label.
    /// Parameters are never modified.
    pub fn predict(&self, ds: &TabularDataset, rng: &mut RngStream, opts: PredictOptions) -> Result<Prediction> {
        let input = PreparedInput::new(ds, self.config.max_classes)?;
        let basis = self.identity_basis(ds.cols(), rng)?;
        let cells = self.encode_streaming(&input, &basis, opts.chunk_rows)?;
        let (n, t, d) = (input.rows(), input.cols() + 1, self.config.d);
        let b = self.params.bind_constant();
        let queries: Vec<usize> = input.query_positions().collect();
        let row = |p: usize, j: usize| &cells.data()[(p * t + j) * d..(p * t + j + 1) * d];
        let z: Vec<f64> = queries.iter().flat_map(|&p| row(p, t - 1).iter().copied()).collect();
        let z = Var::constant(Tensor::new(vec![queries.len(), d], z)?);
        let (mut probabilities, mut regression) = (None, None);
        if !queries.is_empty() {
            match input.task() {
                Task::Classification { classes } => {
                    let p = self.class_logits(&b, &z, classes)?.softmax()?;
                    probabilities = Some(p.value().data().chunks(classes).map(<[f64]>::to_vec).collect());
                }
                Task::Regression => {
                    let s = input.label_scaling().expect("regression inputs carry label scaling");
                    let r = self.regression_head(&b, &z)?;
                    regression = Some(r.value().data().iter().map(|&v| s.denormalize(v)).collect());
                }
            }
        }
        let mut imputed = Vec::new();
        if opts.impute {
            let cols = input.cols();
            let missing: Vec<(usize, usize)> = (0..n)
                .flat_map(|p| (0..cols).map(move |c| (p, c)))
                .filter(|&(p, c)| !input.observed()[p * cols + c])
                .collect();
            if !missing.is_empty() {
                let zx: Vec<f64> = missing.iter().flat_map(|&(p, c)| row(p, c).iter().copied()).collect();
                let zx = Var::constant(Tensor::new(vec![missing.len(), d], zx)?);
                let out = self.imputation_head(&b, &zx)?;
                let scaling = input.column_scaling();
                for (&(p, c), &v) in missing.iter().zip(out.value().data()) {
                    imputed.push(ImputedCell {
                        row: input.order()[p],
                        col: c,
                        value: v * scaling.scale[c] + scaling.mean[c],
                    });
                }
                imputed.sort_by_key(|cell| (cell.row, cell.col));
            }
        }
        Ok(Prediction {
            query_rows: queries.iter().map(|&p| input.order()[p]).collect(),
            probabilities,
            regression,
            imputed,
            identities_orthonormal: basis.orthonormal,
        })
    }
}

fn dims(cells: &Var) -> Result<(usize, usize, usize)> {
    match *cells.shape() {
        [n, t, d] if t >= 2 => Ok((n, t, d)),
        _ => Err(FeatError::Dimension(format!("expected [N, D+1, d] cells, got {:?}", cells.shape()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::check_gradients;

    fn dataset(n: usize, cols: usize, context: usize, task: Task, seed: u64) -> TabularDataset {
        let mut rng = RngStream::new(seed, 9);
        let x: Vec<f64> = (0..n * cols).map(|_| rng.normal()).collect();
        let y = (0..n)
            .map(|i| {
                let v = match task {
                    Task::Classification { classes } => (i % classes) as f64,
                    Task::Regression => x[i * cols] * 2.0 + 1.0,
                };
                (i < context).then_some(v)
            })
            .collect();
        TabularDataset::from_dense(n, cols, x, y, task).unwrap()
    }

    #[test]
    fn output_shapes() {
        let model = FeatModel::new(ModelConfig { layers: 1, d: 16, d_hidden: 8, d_ff: 16, ..ModelConfig::default() }).unwrap();
        let mut rng = RngStream::new(1, 1);
        let p = model.predict(&dataset(10, 3, 6, Task::Classification { classes: 3 }, 1), &mut rng, PredictOptions::default()).unwrap();
        let probs = p.probabilities.unwrap();
        assert_eq!(probs.len(), 4);
        for row in probs {
            assert_eq!(row.len(), 3);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let r = model.predict(&dataset(10, 3, 6, Task::Regression, 2), &mut rng, PredictOptions::default()).unwrap();
        assert_eq!(r.regression.unwrap().len(), 4);
        assert_eq!(r.query_rows, vec![6, 7, 8, 9]);
    }

    #[test]
    fn streaming_matches_the_graph_forward() {
        let cfg = ModelConfig { layers: 2, d: 16, d_hidden: 8, d_ff: 16, afbm_layers: 2, ..ModelConfig::default() };
        let model = FeatModel::new(cfg).unwrap();
        let ds = dataset(13, 4, 9, Task::Regression, 3);
        let input = PreparedInput::new(&ds, model.config().max_classes).unwrap();
        let basis = model.identity_basis(4, &mut RngStream::new(5, 0)).unwrap();
        let full = model.encode(&model.params().bind_constant(), &input, &basis).unwrap();
        for chunk in [1, 4, 64] {
            let streamed = model.encode_streaming(&input, &basis, chunk).unwrap();
            assert!(streamed.max_abs_diff(full.value()) < 1e-12);
        }
    }

    #[test]
    fn frozen_identities_make_prediction_deterministic() {
        let cfg = ModelConfig { layers: 1, d: 16, d_hidden: 8, d_ff: 16, freeze_sdfe: true, ..ModelConfig::default() };
        let model = FeatModel::new(cfg).unwrap();
        let ds = dataset(12, 3, 8, Task::Classification { classes: 2 }, 4);
        let a = model.predict(&ds, &mut RngStream::new(1, 0), PredictOptions::default()).unwrap();
        let b = model.predict(&ds, &mut RngStream::new(2, 0), PredictOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resampled_identities_change_with_the_stream() {
        let model = FeatModel::new(ModelConfig { layers: 1, d: 16, d_hidden: 8, d_ff: 16, ..ModelConfig::default() }).unwrap();
        let a = model.identity_basis(3, &mut RngStream::new(1, 0)).unwrap();
        let b = model.identity_basis(3, &mut RngStream::new(2, 0)).unwrap();
        assert_ne!(a.rows, b.rows);
    }

    #[test]
    fn duplicated_query_rows_get_identical_predictions() {
        let cfg = ModelConfig { layers: 1, d: 16, d_hidden: 8, d_ff: 16, freeze_sdfe: true, sample_axis: false, ..ModelConfig::default() };
        let model = FeatModel::new(cfg).unwrap();
        let mut ds = dataset(8, 3, 6, Task::Classification { classes: 2 }, 5);
        let mut x = ds.x().to_vec();
        x.copy_within(18..21, 21);
        ds = TabularDataset::from_dense(8, 3, x, ds.y().iter().zip(ds.y_observed()).map(|(&y, &o)| o.then_some(y)).collect(), ds.task()).unwrap();
        let p = model.predict(&ds, &mut RngStream::new(0, 0), PredictOptions::default()).unwrap();
        let probs = p.probabilities.unwrap();
        assert_eq!(probs[0], probs[1]);
    }

    #[test]
    fn zero_classification_head_is_uniform() {
        let mut model = FeatModel::new(ModelConfig { layers: 1, d: 16, d_hidden: 8, d_ff: 16, ..ModelConfig::default() }).unwrap();
        let w2 = model.cls_w2;
        let shape = model.params().get(w2).shape().to_vec();
        model.params_mut().set(w2, Tensor::zeros(&shape)).unwrap();
        let p = model.predict(&dataset(6, 2, 3, Task::Classification { classes: 4 }, 6), &mut RngStream::new(0, 0), PredictOptions::default()).unwrap();
        for row in p.probabilities.unwrap() {
            assert!(row.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_regression_head_returns_the_context_mean() {
        let mut model = FeatModel::new(ModelConfig { layers: 1, d: 16, d_hidden: 8, d_ff: 16, ..ModelConfig::default() }).unwrap();
        let w2 = model.regression.w2;
        model.params_mut().set(w2, Tensor::zeros(&[8, 1])).unwrap();
        let ds = dataset(7, 2, 4, Task::Regression, 7);
        let mean = (0..4).map(|i| ds.y()[i]).sum::<f64>() / 4.0;
        let p = model.predict(&ds, &mut RngStream::new(0, 0), PredictOptions::default()).unwrap();
        for v in p.regression.unwrap() {
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn bounded_head_pre_activation_is_scale_free() {
        let model = FeatModel::new(ModelConfig { layers: 1, d: 16, d_hidden: 8, d_ff: 16, ..ModelConfig::default() }).unwrap();
        let b = model.params().bind_constant();
        let z = Tensor::randn(&[3, 16], 1.0, &mut RngStream::new(0, 0));
        let bound = (8.0f64 - 1.0).sqrt();
        for s in [1e-3, 1.0, 1e6] {
            let h = Var::constant(z.map(|v| v * s))
                .matmul(&b[model.regression.w1])
                .unwrap()
                .layer_norm(&b[model.regression.ln_gain], &b[model.regression.ln_bias], LN_EPS)
                .unwrap();
            assert!(h.value().data().iter().all(|v| v.abs() <= bound));
        }
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let model = FeatModel::new(ModelConfig::tiny()).unwrap();
        let params = model.params().clone();
        let z = Tensor::randn(&[4, 8], 1.0, &mut RngStream::new(3, 0));
        let r = check_gradients(
            |v| {
                let b = params.bind_constant();
                let reg = model.regression_head(&b, &v[0])?.sum()?;
                let cls = model.class_logits(&b, &v[0], 3)?.log_softmax()?.sum()?;
                reg.add(&cls)
            },
            &[z],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn imputation_reports_unobserved_cells_in_original_units() {
        let model = FeatModel::new(ModelConfig { layers: 1, d: 16, d_hidden: 8, d_ff: 16, ..ModelConfig::default() }).unwrap();
        let ds = dataset(6, 3, 4, Task::Regression, 8).with_masked_cells(&[(5, 1), (0, 2)]);
        let opts = PredictOptions { impute: true, ..Default::default() };
        let p = model.predict(&ds, &mut RngStream::new(0, 0), opts).unwrap();
        let cells: Vec<(usize, usize)> = p.imputed.iter().map(|c| (c.row, c.col)).collect();
        assert_eq!(cells, vec![(0, 2), (5, 1)]);
        assert!(p.imputed.iter().all(|c| c.value.is_finite()));
    }
}
