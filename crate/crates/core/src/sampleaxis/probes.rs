//! Numerical probes of the sample-axis stack: closed-form scan unrolling,
//! Monte-Carlo variance of the GLA memory and of the smoothing convolution,
//! and Jacobian-norm influence profiles.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{depthwise_conv, gla_scan, selective_scan};
use super::layers::{AfbmLayer, AfbmOptions, ScanMode};
use crate::error::{FeatError, Result};
use crate::numerics::activations::{silu, softplus};
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::params::{ParamSet};
use crate::numerics::random::RngStream;
use crate::numerics::tensor::{gemm, Tensor};

// ── closed-form scan ────────────────────────────────────────────────────

/// Time-invariant scan written as the explicit sum
/// `h_i = Σ_{m≤i} Ā^{i−m} B̄ x_m` with `Ā = exp(Δ·a)`, `B̄ x = Δ·x·W_B`.
///
/// `x` is `[N, d]`, `w_b` is `[d, S]`. Quadratic in `N`.
pub fn unrolled_states(x: &[f64], w_b: &[f64], delta: f64, a: &[f64], n: usize, d: usize) -> Vec<f64> {
    let s = a.len();
    let mut bx = vec![0.0; n * s];
    gemm(n, d, s, x, false, w_b, false, &mut bx, false);
    let abar: Vec<f64> = a.iter().map(|v| (delta * v).exp()).collect();
    let mut h = vec![0.0; n * s];
    for i in 0..n {
        for m in 0..=i {
            for k in 0..s {
                h[i * s + k] += abar[k].powi((i - m) as i32) * delta * bx[m * s + k];
            }
        }
    }
    h
}

/// Largest deviation between the recurrent scan and [`unrolled_states`]
/// for random time-invariant parameters.
pub fn scan_oracle_gap(n: usize, d: usize, d_state: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0x5ca7);
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let w_b = Tensor::randn(&[d, d_state], 1.0 / (d as f64).sqrt(), &mut rng);
    let a: Vec<f64> = (0..d_state).map(|_| -rng.log_uniform(0.01, 1.0)).collect();
    let delta = softplus(rng.normal());
    let mut u = vec![0.0; n * d_state];
    gemm(n, d, d_state, x.data(), false, w_b.data(), false, &mut u, false);
    let rec = selective_scan(&u, &vec![delta; n], &a, (n, 1, d_state), false);
    let closed = unrolled_states(x.data(), w_b.data(), delta, &a, n, d);
    rec.iter().zip(&closed).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

// ── memory variance ─────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarianceProbeConfig {
    /// Memory width.
    pub d: usize,
    pub trials: usize,
    pub n_small: usize,
    pub n_large: usize,
    /// Expected number of informative tokens per channel.
    pub informative: usize,
    pub mean: f64,
    pub std: f64,
    /// Smoothing width applied to the values before gating.
    pub kernel: usize,
    /// Pre-activation that closes a gate.
    pub closed_logit: f64,
    pub seed: u64,
}

impl Default for VarianceProbeConfig {
    fn default() -> Self {
        VarianceProbeConfig {
            d: 32,
            trials: 200,
            n_small: 2000,
            n_large: 4000,
            informative: 50,
            mean: 1.0,
            std: 1.0,
            kernel: 5,
            closed_logit: -30.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRatio {
    pub var_small: f64,
    pub var_large: f64,
    pub ratio: f64,
}

/// Mean over memory entries of the across-trial variance of the final GLA
/// memory for sequences of length `n`.
///
/// Values are `mean + std·z`, smoothed by a uniform kernel, keys map to the
/// all-ones vector. With `gated`, each channel of each token is informative
/// (gate 1) with probability `informative / n` and closed
/// (`SiLU(closed_logit)`) otherwise; without it every gate is 1.
pub fn memory_variance(cfg: &VarianceProbeConfig, n: usize, gated: bool) -> Result<f64> {
    if cfg.trials < 2 || n == 0 || cfg.d == 0 || cfg.kernel % 2 == 0 {
        return Err(FeatError::config("variance", "need ≥2 trials, n ≥ 1, d ≥ 1 and an odd kernel"));
    }
    let d = cfg.d;
    let rho = (cfg.informative as f64 / n as f64).min(1.0);
    let closed = silu(cfg.closed_logit);
    let weights = vec![1.0 / cfg.kernel as f64; d * cfg.kernel];
    let stream = (n as u64) << 1 | gated as u64;
    let finals: Vec<Vec<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = RngStream::new(cfg.seed ^ (trial as u64).wrapping_mul(0x9e37_79b9), stream);
            let v: Vec<f64> = (0..n * d).map(|_| cfg.mean + cfg.std * rng.normal()).collect();
            let mut values = depthwise_conv(&v, &weights, (n, 1, d), cfg.kernel);
            if gated {
                for x in values.iter_mut() {
                    let u: f64 = rand::Rng::random(&mut rng);
                    *x *= if u < rho { 1.0 } else { closed };
                }
            }
            let keys = vec![1.0; n * d];
            let queries = vec![0.0; n * d];
            let (_, mem) = gla_scan(&keys, &values, &queries, (n, 1, d));
            mem.into_iter().next().expect("one column").s
        })
        .collect();
    let entries = d * d;
    let t = cfg.trials as f64;
    let mut total = 0.0;
    for e in 0..entries {
        let mean = finals.iter().map(|f| f[e]).sum::<f64>() / t;
        total += finals.iter().map(|f| (f[e] - mean).powi(2)).sum::<f64>() / (t - 1.0);
    }
    Ok(total / entries as f64)
}

/// `Var(S_{n_large}) / Var(S_{n_small})`.
pub fn memory_variance_ratio(cfg: &VarianceProbeConfig, gated: bool) -> Result<VarianceRatio> {
    let var_small = memory_variance(cfg, cfg.n_small, gated)?;
    let var_large = memory_variance(cfg, cfg.n_large, gated)?;
    Ok(VarianceRatio {
        var_small,
        var_large,
        ratio: var_large / var_small,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvVarianceReport {
    pub kernel: usize,
    /// Empirical output variance per channel.
    pub variances: Vec<f64>,
    /// `Σ_m w_m²` per channel.
    pub predicted: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

/// Output variance of the smoothing convolution on `samples` i.i.d.
/// unit-variance inputs, for softmax kernels drawn from `N(0, logit_std²)`
/// logits.
pub fn conv_variance(channels: usize, kernel: usize, samples: usize, logit_std: f64, seed: u64) -> Result<ConvVarianceReport> {
    if kernel % 2 == 0 || samples < 2 {
        return Err(FeatError::config("kernel", "needs an odd kernel and at least two samples"));
    }
    let mut rng = RngStream::new(seed, 0xc0);
    let logits = Var::constant(Tensor::randn(&[channels, kernel], logit_std, &mut rng));
    let w = logits.softmax()?.value().clone();
    let x: Vec<f64> = (0..samples * channels).map(|_| rng.normal()).collect();
    let y = depthwise_conv(&x, w.data(), (samples, 1, channels), kernel);
    let mut variances = Vec::with_capacity(channels);
    for c in 0..channels {
        let col: Vec<f64> = (0..samples).map(|i| y[i * channels + c]).collect();
        let m = col.iter().sum::<f64>() / samples as f64;
        variances.push(col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (samples - 1) as f64);
    }
    let predicted = w.data().chunks(kernel).map(|r| r.iter().map(|v| v * v).sum()).collect();
    let min = variances.iter().copied().fold(f64::INFINITY, f64::min);
    let max = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ConvVarianceReport {
        kernel,
        variances,
        predicted,
        min,
        max,
    })
}

// ── influence ───────────────────────────────────────────────────────────

/// `I[i][k] = ‖∂y_{i,col} / ∂x_{k,col}‖_F` for `y = f(x)`, `x` `[N, T, d]`,
/// by one reverse pass per output coordinate.
pub fn influence_matrix<F>(f: F, x: &Tensor, col: usize) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&Var) -> Result<Var>,
{
    let (n, t, d) = match *x.shape() {
        [n, t, d] if col < t => (n, t, d),
        _ => return Err(FeatError::Dimension(format!("influence on {:?} column {col}", x.shape()))),
    };
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let y = f(&leaf)?;
    if y.shape() != x.shape() {
        return Err(FeatError::Dimension(format!("map changed shape to {:?}", y.shape())));
    }
    let mut grid = vec![vec![0.0; n]; n];
    for (i, row) in grid.iter_mut().enumerate() {
        for c in 0..d {
            let mut cot = Tensor::zeros(x.shape());
            cot.set(&[i, col, c], 1.0);
            let g = tape.vjp(&y, &cot)?.get_or_zeros(&leaf);
            for (k, acc) in row.iter_mut().enumerate() {
                let o = (k * t + col) * d;
                *acc += g.data()[o..o + d].iter().map(|v| v * v).sum::<f64>();
            }
        }
    }
    grid.iter_mut().flatten().for_each(|v| *v = v.sqrt());
    Ok(grid)
}

/// Influence of one AFBM layer's output row `i` on input row `k` of one
/// column.
pub fn influence_norm(layer: &AfbmLayer, params: &ParamSet, x: &Tensor, i: usize, k: usize, col: usize) -> Result<f64> {
    let b = params.bind_constant();
    let grid = influence_matrix(|v| layer.forward(&b, v), x, col)?;
    grid.get(i)
        .and_then(|r| r.get(k))
        .copied()
        .ok_or_else(|| FeatError::Dimension(format!("rows {i}, {k} out of range")))
}

/// Closed form of the influence of a time-invariant AFBM layer for `k ≠ i`:
/// `‖J_LN(i) · (Δ·W_B·diag(Ā^{|i−k|})·W_dir)ᵀ‖_F`, with `W_dir` the fusion
/// block of the scan that carries row `k` to row `i`.
pub fn closed_form_influence(layer: &AfbmLayer, params: &ParamSet, x: &Tensor, i: usize, k: usize, col: usize) -> Result<f64> {
    let opts = *layer.options();
    if opts.mode != ScanMode::TimeInvariant || i == k {
        return Err(FeatError::Contract("closed form needs time-invariant mode and k ≠ i".into()));
    }
    let dir = if k < i { layer.forward_params() } else if opts.bidirectional { layer.backward_params() } else { return Ok(0.0) };
    let (d, s) = (opts.d, opts.d_state);
    let delta = softplus(params.get(dir.b_delta).data()[0]);
    let lag = i.abs_diff(k) as i32;
    let decay: Vec<f64> = params.get(dir.a_log).data().iter().map(|al| (-delta * al.exp()).exp().powi(lag)).collect();
    // M[p][q] = ∂f_q / ∂x_p = Δ Σ_r W_B[p,r] decay[r] W[r,q]
    let w_b = params.get(dir.w_b).data();
    let w = params.get(dir.w_fuse).data();
    let mut m = vec![0.0; d * d];
    for p in 0..d {
        for r in 0..s {
            let coef = delta * w_b[p * s + r] * decay[r];
            for q in 0..d {
                m[p * d + q] += coef * w[r * d + q];
            }
        }
    }
    // layer-norm Jacobian at the fused pre-activation of row i
    let b = params.bind_constant();
    let fused = layer.fused(&b, &Var::constant(x.clone()))?;
    let t = x.shape()[1];
    let f = &fused.value().data()[(i * t + col) * d..(i * t + col + 1) * d];
    let mean = f.iter().sum::<f64>() / d as f64;
    let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + 1e-5).sqrt();
    let xhat: Vec<f64> = f.iter().map(|v| (v - mean) * inv).collect();
    let (gain_id, _) = layer.ln_params();
    let gain = params.get(gain_id).data();
    // J[q][o] = ∂y_o/∂f_q = gain_o·inv·(δ_qo − 1/d − x̂_q x̂_o / d)
    let mut total = 0.0;
    for p in 0..d {
        for o in 0..d {
            let mut acc = 0.0;
            for q in 0..d {
                let j = gain[o] * inv * (f64::from(q == o) - 1.0 / d as f64 - xhat[q] * xhat[o] / d as f64);
                acc += m[p * d + q] * j;
            }
            total += acc * acc;
        }
    }
    Ok(total.sqrt())
}

/// Summary of an influence grid around interior rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfluenceSummary {
    /// `max |I(i,i−Δ) − I(i,i+Δ)| / I(i,i−Δ)` over interior `i` and valid `Δ`.
    pub max_asymmetry: f64,
    /// Largest `I(i,k)` with `k > i`.
    pub max_future: f64,
    /// Smallest `I(i,i)`.
    pub min_diagonal: f64,
}

pub fn summarize_influence(grid: &[Vec<f64>]) -> InfluenceSummary {
    let n = grid.len();
    let mut max_asymmetry: f64 = 0.0;
    let mut max_future: f64 = 0.0;
    let mut min_diagonal = f64::INFINITY;
    for i in 0..n {
        min_diagonal = min_diagonal.min(grid[i][i]);
        for k in i + 1..n {
            max_future = max_future.max(grid[i][k]);
        }
        for lag in 1..=i.min(n - 1 - i) {
            let (past, future) = (grid[i][i - lag], grid[i][i + lag]);
            if past > 0.0 {
                max_asymmetry = max_asymmetry.max((past - future).abs() / past);
            } else if future != 0.0 {
                max_asymmetry = f64::INFINITY;
            }
        }
    }
    InfluenceSummary {
        max_asymmetry,
        max_future,
        min_diagonal,
    }
}

/// A single time-invariant AFBM layer for influence experiments.
pub fn influence_layer(d: usize, d_state: usize, bidirectional: bool, tie: bool, seed: u64) -> Result<(ParamSet, AfbmLayer)> {
    let mut params = ParamSet::new();
    let opts = AfbmOptions {
        d,
        d_state,
        mode: ScanMode::TimeInvariant,
        bidirectional,
        tie_directions: tie,
    };
    let layer = AfbmLayer::new(&mut params, "probe", opts, &mut RngStream::new(seed, 0x1f))?;
    // a larger step makes the decay visible over a short grid
    for dir in [layer.forward_params().clone(), layer.backward_params().clone()] {
        params.set(dir.b_delta, Tensor::from_vec(vec![0.5]))?;
    }
    Ok((params, layer))
}
