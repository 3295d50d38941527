//! Cell-level embedding: per-cell value projections, mask tokens, random
//! orthonormal column identities and the appended label token.

mod dataset;

pub use dataset::{ColumnScaling, LabelScaling, TabularDataset, Task};

use crate::error::{FeatError, Result};
use crate::numerics::autograd::Var;
use crate::numerics::params::{glorot, Bound, ParamId, ParamSet};
use crate::numerics::random::{normalized_gaussian_rows, orthonormal_rows, RngStream};
use crate::numerics::tensor::Tensor;

/// Upper bound on `|GELU'(x)|`, attained at `x = √2`.
pub const GELU_SLOPE_MAX: f64 = 1.1290;

const LN_EPS: f64 = 1e-5;

/// Two-layer map `1 → hidden → d` with a GELU hidden layer.
#[derive(Clone, Debug)]
pub struct ScalarMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl ScalarMlp {
    /// The output bias is drawn with standard deviation `out_bias_std`
    /// (zero gives a zero bias).
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        hidden: usize,
        d: usize,
        out_bias_std: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let w1 = params.add(format!("{prefix}.w1"), glorot(&[1, hidden], 1, hidden, rng))?;
        let b1 = params.add(format!("{prefix}.b1"), Tensor::zeros(&[hidden]))?;
        let w2 = params.add(format!("{prefix}.w2"), glorot(&[hidden, d], hidden, d, rng))?;
        let b2 = if out_bias_std > 0.0 {
            Tensor::randn(&[d], out_bias_std, rng)
        } else {
            Tensor::zeros(&[d])
        };
        let b2 = params.add(format!("{prefix}.b2"), b2)?;
        Ok(ScalarMlp { w1, b1, w2, b2 })
    }

    /// `x` is `[n, 1]`; the result is `[n, d]`.
    pub fn forward(&self, b: &Bound, x: &Var) -> Result<Var> {
        x.matmul(&b[self.w1])?
            .add(&b[self.b1])?
            .gelu()?
            .matmul(&b[self.w2])?
            .add(&b[self.b2])
    }

    /// Lipschitz constant bound `‖W1‖_F · max|GELU'| · ‖W2‖_F`.
    pub fn lipschitz_bound(&self, params: &ParamSet) -> f64 {
        params.get(self.w1).norm() * GELU_SLOPE_MAX * params.get(self.w2).norm()
    }
}

/// Column identity basis for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityBasis {
    /// `D × d/4`.
    pub rows: Tensor,
    /// False when `D > d/4` forced unit-norm Gaussian rows.
    pub orthonormal: bool,
}

/// Draw `cols` identity rows of width `d/4`. With more columns than the
/// subspace holds, `strict` fails with a rank error; otherwise the rows are
/// only near-orthogonal.
pub fn draw_identity_basis(cols: usize, d: usize, strict: bool, rng: &mut RngStream) -> Result<IdentityBasis> {
    let r = d / 4;
    match orthonormal_rows(cols, r, rng) {
        Ok(rows) => Ok(IdentityBasis { rows, orthonormal: true }),
        Err(FeatError::Rank { .. }) if !strict => Ok(IdentityBasis {
            rows: normalized_gaussian_rows(cols, r, rng),
            orthonormal: false,
        }),
        Err(e) => Err(e),
    }
}

/// Learnable parameters of the embedding stage.
#[derive(Clone, Debug)]
pub struct Embedding {
    d: usize,
    value_mlp: ScalarMlp,
    mask_token: ParamId,
    w_dfe: ParamId,
    label_mlp: ScalarMlp,
    label_mask: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl Embedding {
    pub fn new(params: &mut ParamSet, d: usize, hidden: usize, rng: &mut RngStream) -> Result<Self> {
        if d == 0 || d % 4 != 0 {
            return Err(FeatError::config("d", format!("must be a positive multiple of 4, got {d}")));
        }
        let token_std = 1.0 / (d as f64).sqrt();
        Ok(Embedding {
            d,
            value_mlp: ScalarMlp::new(params, "embed.value", hidden, d, 0.0, rng)?,
            mask_token: params.add("embed.mask_token", Tensor::randn(&[d], token_std, rng))?,
            w_dfe: params.add("embed.w_dfe", glorot(&[d / 4, d], d / 4, d, rng))?,
            // Label tokens reach a LayerNorm with no column offset added, and
            // GELU(0) = 0, so a zero output bias would embed class 0 as the
            // zero vector, the singular point of that LayerNorm.
            label_mlp: ScalarMlp::new(params, "embed.label", hidden, d, token_std, rng)?,
            label_mask: params.add("embed.label_mask", Tensor::randn(&[d], token_std, rng))?,
            ln_gain: params.add("embed.ln.gain", Tensor::ones(&[d]))?,
            ln_bias: params.add("embed.ln.bias", Tensor::zeros(&[d]))?,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn value_mlp(&self) -> &ScalarMlp {
        &self.value_mlp
    }

    pub fn mask_token(&self) -> ParamId {
        self.mask_token
    }

    pub fn label_mask(&self) -> ParamId {
        self.label_mask
    }

    pub fn w_dfe(&self) -> ParamId {
        self.w_dfe
    }

    /// `[n, d]` embeddings: the value MLP for observed cells, the mask token
    /// (bitwise) for the rest. Unobserved values are never read.
    pub fn embed_values(&self, b: &Bound, values: &[f64], observed: &[bool]) -> Result<Var> {
        if values.len() != observed.len() {
            return Err(FeatError::Dimension(format!(
                "{} values with {} flags",
                values.len(),
                observed.len()
            )));
        }
        if let Some(v) = values.iter().zip(observed).find(|(v, o)| **o && !v.is_finite()) {
            return Err(FeatError::Input(format!("observed value {} is not finite", v.0)));
        }
        let x: Vec<f64> = values.iter().zip(observed).map(|(&v, &o)| if o { v } else { 0.0 }).collect();
        let n = x.len();
        let x = Var::constant(Tensor::new(vec![n, 1], x)?);
        self.value_mlp.forward(b, &x)?.masked_fill_rows(observed, &b[self.mask_token])
    }

    /// Column identities `O·W_dfe`, `[D, d]`.
    pub fn identifiers(&self, b: &Bound, basis: &IdentityBasis) -> Result<Var> {
        if basis.rows.rank() != 2 || basis.rows.shape()[1] != self.d / 4 {
            return Err(FeatError::Dimension(format!(
                "identity basis {:?} for d = {}",
                basis.rows.shape(),
                self.d
            )));
        }
        Var::constant(basis.rows.clone()).matmul(&b[self.w_dfe])
    }

    /// `LayerNorm(e_val + loc)` for a block of rows: `values`/`observed`
    /// are row-major `[rows, D]` (already standardized), `loc` is `[D, d]`.
    pub fn assemble_cells(&self, b: &Bound, values: &[f64], observed: &[bool], loc: &Var) -> Result<Var> {
        let cols = loc.shape()[0];
        if cols == 0 || values.len() % cols != 0 {
            return Err(FeatError::Dimension(format!(
                "{} values do not fill rows of {cols} columns",
                values.len()
            )));
        }
        let rows = values.len() / cols;
        self.embed_values(b, values, observed)?
            .reshape(&[rows, cols, self.d])?
            .add(loc)?
            .layer_norm(&b[self.ln_gain], &b[self.ln_bias], LN_EPS)
    }

    /// Label tokens `[n, d]`: the label MLP for observed labels, the label
    /// mask token for the rest.
    pub fn label_tokens(&self, b: &Bound, labels: &[f64], observed: &[bool]) -> Result<Var> {
        if let Some(v) = labels.iter().zip(observed).find(|(v, o)| **o && !v.is_finite()) {
            return Err(FeatError::Input(format!("observed label {} is not finite", v.0)));
        }
        let y: Vec<f64> = labels.iter().zip(observed).map(|(&v, &o)| if o { v } else { 0.0 }).collect();
        let n = y.len();
        let y = Var::constant(Tensor::new(vec![n, 1], y)?);
        self.label_mlp.forward(b, &y)?.masked_fill_rows(observed, &b[self.label_mask])
    }
}

/// Append one label token per row as a trailing column:
/// `[N, D, d]` and `[N, d]` give `[N, D+1, d]`.
pub fn append_label_token(cells: &Var, tokens: &Var) -> Result<Var> {
    let (n, d) = match *cells.shape() {
        [n, _, d] => (n, d),
        _ => return Err(FeatError::Dimension(format!("cells must be rank 3, got {:?}", cells.shape()))),
    };
    if tokens.shape() != [n, d] {
        return Err(FeatError::Dimension(format!(
            "label tokens {:?} for cells {:?}",
            tokens.shape(),
            cells.shape()
        )));
    }
    Var::concat(&[cells, &tokens.reshape(&[n, 1, d])?], 1)
}
