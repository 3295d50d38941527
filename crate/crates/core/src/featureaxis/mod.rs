//! Feature-axis modeling: pre-LN multi-head self-attention and a GELU
//! feed-forward network over the tokens of each row, never across rows.

use crate::error::{FeatError, Result};
use crate::numerics::autograd::Var;
use crate::numerics::params::{glorot, Bound, ParamId, ParamSet};
use crate::numerics::random::RngStream;
use crate::numerics::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// One transformer sub-block acting on `[rows, tokens, d]`.
#[derive(Clone, Debug)]
pub struct FeatureBlock {
    d: usize,
    heads: usize,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
}

impl FeatureBlock {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(FeatError::config("heads", format!("{heads} heads do not divide d = {d}")));
        }
        let mut add = |name: &str, t: Tensor| params.add(format!("{prefix}.{name}"), t);
        Ok(FeatureBlock {
            d,
            heads,
            ln1_gain: add("ln1.gain", Tensor::ones(&[d]))?,
            ln1_bias: add("ln1.bias", Tensor::zeros(&[d]))?,
            w_q: add("attn.w_q", glorot(&[d, d], d, d, rng))?,
            w_k: add("attn.w_k", glorot(&[d, d], d, d, rng))?,
            w_v: add("attn.w_v", glorot(&[d, d], d, d, rng))?,
            w_o: add("attn.w_o", glorot(&[d, d], d, d, rng))?,
            ln2_gain: add("ln2.gain", Tensor::ones(&[d]))?,
            ln2_bias: add("ln2.bias", Tensor::zeros(&[d]))?,
            ffn_w1: add("ffn.w1", glorot(&[d, d_ff], d, d_ff, rng))?,
            ffn_b1: add("ffn.b1", Tensor::zeros(&[d_ff]))?,
            ffn_w2: add("ffn.w2", glorot(&[d_ff, d], d_ff, d, rng))?,
            ffn_b2: add("ffn.b2", Tensor::zeros(&[d]))?,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.ln1_gain,
            self.ln1_bias,
            self.w_q,
            self.w_k,
            self.w_v,
            self.w_o,
            self.ln2_gain,
            self.ln2_bias,
            self.ffn_w1,
            self.ffn_b1,
            self.ffn_w2,
            self.ffn_b2,
        ]
    }

    fn dims(&self, x: &Var) -> Result<(usize, usize)> {
        match *x.shape() {
            [r, t, d] if d == self.d && t >= 1 => Ok((r, t)),
            _ => Err(FeatError::Dimension(format!(
                "feature block of width {} got {:?}",
                self.d,
                x.shape()
            ))),
        }
    }

    /// Split `[r, t, d]` into `[r·H, t, d/H]`.
    fn split_heads(&self, x: &Var, r: usize, t: usize) -> Result<Var> {
        let dh = self.d / self.heads;
        x.reshape(&[r, t, self.heads, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[r * self.heads, t, dh])
    }

    /// Attention weights `[r·H, t, t]` for already-normalized tokens.
    pub fn attention_weights(&self, b: &Bound, x: &Var) -> Result<Var> {
        let (r, t) = self.dims(x)?;
        let dh = self.d / self.heads;
        let q = self.split_heads(&x.matmul(&b[self.w_q])?, r, t)?;
        let k = self.split_heads(&x.matmul(&b[self.w_k])?, r, t)?;
        let kt = k.permute(&[0, 2, 1])?;
        q.matmul(&kt)?.scale(1.0 / (dh as f64).sqrt())?.softmax()
    }

    /// Multi-head self-attention over the tokens of each row.
    pub fn mhsa(&self, b: &Bound, x: &Var) -> Result<Var> {
        let (r, t) = self.dims(x)?;
        let attn = self.attention_weights(b, x)?;
        let v = self.split_heads(&x.matmul(&b[self.w_v])?, r, t)?;
        let dh = self.d / self.heads;
        attn.matmul(&v)?
            .reshape(&[r, self.heads, t, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[r, t, self.d])?
            .matmul(&b[self.w_o])
    }

    fn ffn(&self, b: &Bound, x: &Var) -> Result<Var> {
        x.matmul(&b[self.ffn_w1])?
            .add(&b[self.ffn_b1])?
            .gelu()?
            .matmul(&b[self.ffn_w2])?
            .add(&b[self.ffn_b2])
    }

    /// `F̃ = F + MHSA(LN(F))`, `F̂ = F̃ + FFN(LN(F̃))`.
    pub fn forward(&self, b: &Bound, x: &Var) -> Result<Var> {
        let h = x.layer_norm(&b[self.ln1_gain], &b[self.ln1_bias], LN_EPS)?;
        let x = x.add(&self.mhsa(b, &h)?)?;
        let h = x.layer_norm(&b[self.ln2_gain], &b[self.ln2_bias], LN_EPS)?;
        x.add(&self.ffn(b, &h)?)
    }
}
