//! Sample-axis layers: bidirectional selective state-space fusion (AFBM)
//! and convolution-smoothed gated linear attention (Conv-GLA).
//!
//! Inputs are `[N, T, d]`; every column `t` is an independent sequence over
//! the `N` rows. Each layer computes `x + LayerNorm(f(x))`.

use serde::{Deserialize, Serialize};

use super::kernels::{depthwise_conv_var, gla_scan_var, selective_scan_var};
use crate::error::{FeatError, Result};
use crate::numerics::autograd::Var;
use crate::numerics::params::{glorot, Bound, ParamId, ParamSet};
use crate::numerics::random::RngStream;
use crate::numerics::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// How the step size of the state-space scan is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    /// `Δ_i = softplus(x_i·w_Δ + b_Δ)` per row.
    Selective,
    /// `Δ = softplus(b_Δ)` shared by all rows.
    TimeInvariant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AfbmOptions {
    pub d: usize,
    pub d_state: usize,
    pub mode: ScanMode,
    /// Without the backward scan the layer is causal.
    pub bidirectional: bool,
    /// Backward direction reuses the forward parameters.
    pub tie_directions: bool,
}

/// Parameters of one scan direction.
#[derive(Clone, Debug)]
pub struct ScanParams {
    /// `A = −exp(a_log)`, length `d_state`.
    pub a_log: ParamId,
    /// Input map `[d, d_state]`.
    pub w_b: ParamId,
    /// Step-size projection `[d, 1]` and bias `[1]`.
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    /// Fusion block `[d_state, d]` for this direction.
    pub w_fuse: ParamId,
}

impl ScanParams {
    fn new(params: &mut ParamSet, prefix: &str, o: &AfbmOptions, rng: &mut RngStream) -> Result<Self> {
        let (d, s) = (o.d, o.d_state);
        // A log-uniform in [−1, −0.01]
        let a_log = Tensor::from_fn(&[s], |_| rng.log_uniform(0.01, 1.0).ln());
        // step size log-uniform in [0.001, 0.1], stored through softplus⁻¹
        let dt = rng.log_uniform(1e-3, 1e-1);
        let b_delta = Tensor::from_vec(vec![dt.exp_m1().ln()]);
        Ok(ScanParams {
            a_log: params.add(format!("{prefix}.a_log"), a_log)?,
            w_b: params.add(format!("{prefix}.w_b"), glorot(&[d, s], d, s, rng))?,
            w_delta: params.add(format!("{prefix}.w_delta"), glorot(&[d, 1], d, 1, rng))?,
            b_delta: params.add(format!("{prefix}.b_delta"), b_delta)?,
            w_fuse: params.add(format!("{prefix}.w_fuse"), glorot(&[s, d], 2 * s, d, rng))?,
        })
    }

    /// Step sizes `[N, T]`.
    pub fn step_sizes(&self, b: &Bound, x: &Var, mode: ScanMode) -> Result<Var> {
        let (n, t) = (x.shape()[0], x.shape()[1]);
        match mode {
            ScanMode::Selective => x
                .matmul(&b[self.w_delta])?
                .add(&b[self.b_delta])?
                .softplus()?
                .reshape(&[n, t]),
            ScanMode::TimeInvariant => b[self.b_delta].softplus()?.reshape(&[])?.expand(&[n, t]),
        }
    }

    /// Continuous decay `A`, strictly negative.
    pub fn decay(&self, b: &Bound) -> Result<Var> {
        b[self.a_log].exp()?.neg()
    }

    /// Hidden states `[N, T, d_state]` of this direction.
    pub fn states(&self, b: &Bound, x: &Var, mode: ScanMode, reverse: bool) -> Result<Var> {
        let u = x.matmul(&b[self.w_b])?;
        let delta = self.step_sizes(b, x, mode)?;
        selective_scan_var(&u, &delta, &self.decay(b)?, reverse)
    }
}

/// Bidirectional state-space layer with a learned fusion of both scans.
#[derive(Clone, Debug)]
pub struct AfbmLayer {
    opts: AfbmOptions,
    fwd: ScanParams,
    bwd: ScanParams,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

impl AfbmLayer {
    pub fn new(params: &mut ParamSet, prefix: &str, opts: AfbmOptions, rng: &mut RngStream) -> Result<Self> {
        let fwd = ScanParams::new(params, &format!("{prefix}.fwd"), &opts, rng)?;
        let bwd = if opts.tie_directions {
            fwd.clone()
        } else {
            ScanParams::new(params, &format!("{prefix}.bwd"), &opts, rng)?
        };
        let d = opts.d;
        Ok(AfbmLayer {
            opts,
            fwd,
            bwd,
            ln_gain: params.add(format!("{prefix}.ln.gain"), Tensor::ones(&[d]))?,
            ln_bias: params.add(format!("{prefix}.ln.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn options(&self) -> &AfbmOptions {
        &self.opts
    }

    pub fn forward_params(&self) -> &ScanParams {
        &self.fwd
    }

    pub fn backward_params(&self) -> &ScanParams {
        &self.bwd
    }

    pub fn ln_params(&self) -> (ParamId, ParamId) {
        (self.ln_gain, self.ln_bias)
    }

    /// Fused representation `W→·h→ + W←·h←` before the residual wrapper.
    pub fn fused(&self, b: &Bound, x: &Var) -> Result<Var> {
        check_width(x, self.opts.d)?;
        let mode = self.opts.mode;
        let fwd = self.fwd.states(b, x, mode, false)?.matmul(&b[self.fwd.w_fuse])?;
        if !self.opts.bidirectional {
            return Ok(fwd);
        }
        let bwd = self.bwd.states(b, x, mode, true)?.matmul(&b[self.bwd.w_fuse])?;
        fwd.add(&bwd)
    }

    pub fn forward(&self, b: &Bound, x: &Var) -> Result<Var> {
        let f = self.fused(b, x)?;
        x.add(&f.layer_norm(&b[self.ln_gain], &b[self.ln_bias], LN_EPS)?)
    }
}

/// Depthwise smoothing followed by gated linear attention.
#[derive(Clone, Debug)]
pub struct ConvGlaLayer {
    d: usize,
    kernel: usize,
    kernel_logits: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_g: ParamId,
    w_q: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

/// Intermediate tensors of one Conv-GLA pass.
pub struct ConvGlaTrace {
    pub smoothed: Var,
    pub keys: Var,
    pub gated_values: Var,
    pub queries: Var,
    pub readout: Var,
}

impl ConvGlaLayer {
    pub fn new(params: &mut ParamSet, prefix: &str, d: usize, kernel: usize, rng: &mut RngStream) -> Result<Self> {
        if kernel == 0 || kernel % 2 == 0 {
            return Err(FeatError::config("kernel", format!("must be odd, got {kernel}")));
        }
        let mut add = |name: &str, t: Tensor| params.add(format!("{prefix}.{name}"), t);
        Ok(ConvGlaLayer {
            d,
            kernel,
            kernel_logits: add("conv.logits", Tensor::randn(&[d, kernel], 0.1, rng))?,
            w_k: add("w_k", glorot(&[d, d], d, d, rng))?,
            w_v: add("w_v", glorot(&[d, d], d, d, rng))?,
            w_g: add("w_g", glorot(&[d, d], d, d, rng))?,
            w_q: add("w_q", glorot(&[d, d], d, d, rng))?,
            ln_gain: add("ln.gain", Tensor::ones(&[d]))?,
            ln_bias: add("ln.bias", Tensor::zeros(&[d]))?,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn kernel_logits(&self) -> ParamId {
        self.kernel_logits
    }

    pub fn gate_weight(&self) -> ParamId {
        self.w_g
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![
            self.kernel_logits,
            self.w_k,
            self.w_v,
            self.w_g,
            self.w_q,
            self.ln_gain,
            self.ln_bias,
        ]
    }

    /// Per-channel kernel weights `[d, K]`: non-negative, rows sum to one.
    pub fn kernel_weights(&self, b: &Bound) -> Result<Var> {
        b[self.kernel_logits].softmax()
    }

    pub fn trace(&self, b: &Bound, x: &Var) -> Result<ConvGlaTrace> {
        check_width(x, self.d)?;
        let smoothed = depthwise_conv_var(x, &self.kernel_weights(b)?)?;
        let keys = smoothed.matmul(&b[self.w_k])?.phi()?;
        let values = smoothed.matmul(&b[self.w_v])?;
        let gates = smoothed.matmul(&b[self.w_g])?.silu()?;
        let gated_values = gates.mul(&values)?;
        let queries = smoothed.matmul(&b[self.w_q])?.phi()?;
        let readout = gla_scan_var(&keys, &gated_values, &queries)?;
        Ok(ConvGlaTrace {
            smoothed,
            keys,
            gated_values,
            queries,
            readout,
        })
    }

    pub fn forward(&self, b: &Bound, x: &Var) -> Result<Var> {
        let readout = self.trace(b, x)?.readout;
        x.add(&readout.layer_norm(&b[self.ln_gain], &b[self.ln_bias], LN_EPS)?)
    }
}

fn check_width(x: &Var, d: usize) -> Result<()> {
    match *x.shape() {
        [n, _, w] if w == d && n >= 1 => Ok(()),
        _ => Err(FeatError::Dimension(format!(
            "sample-axis layer of width {d} got {:?}",
            x.shape()
        ))),
    }
}

/// Options for the full sample-axis stage.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleAxisOptions {
    pub afbm: AfbmOptions,
    pub afbm_layers: usize,
    pub kernel: usize,
}

/// Fixed topology: AFBM layers followed by one Conv-GLA layer.
#[derive(Clone, Debug)]
pub struct SampleAxisBlock {
    afbm: Vec<AfbmLayer>,
    gla: ConvGlaLayer,
}

impl SampleAxisBlock {
    pub fn new(params: &mut ParamSet, prefix: &str, opts: SampleAxisOptions, rng: &mut RngStream) -> Result<Self> {
        let afbm = (0..opts.afbm_layers)
            .map(|l| AfbmLayer::new(params, &format!("{prefix}.afbm{l}"), opts.afbm, rng))
            .collect::<Result<Vec<_>>>()?;
        let gla = ConvGlaLayer::new(params, &format!("{prefix}.gla"), opts.afbm.d, opts.kernel, rng)?;
        Ok(SampleAxisBlock { afbm, gla })
    }

    pub fn afbm_layers(&self) -> &[AfbmLayer] {
        &self.afbm
    }

    pub fn gla_layer(&self) -> &ConvGlaLayer {
        &self.gla
    }

    pub fn forward(&self, b: &Bound, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for layer in &self.afbm {
            h = layer.forward(b, &h)?;
        }
        self.gla.forward(b, &h)
    }
}
