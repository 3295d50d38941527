//! Property probes: memory and convolution variance, influence symmetry,
//! end-to-end gradients and the closed-form scan.

use std::time::Instant;

use feat::numerics::{ParamSet, RngStream, Tensor};
use feat::sampleaxis::probes::{
    closed_form_influence, conv_variance, influence_layer, influence_matrix, memory_variance_ratio, scan_oracle_gap,
    summarize_influence, VarianceProbeConfig,
};
use feat::sampleaxis::AfbmLayer;
use feat::train::gradcheck_tiny;
use serde::{Deserialize, Serialize};

use super::Context;
use crate::error::CliError;
use crate::report::{RunReport, Threshold};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceCheckConfig {
    pub memory: VarianceProbeConfig,
    pub conv_channels: usize,
    pub conv_samples: usize,
    pub conv_logit_std: f64,
    pub ungated_band: [f64; 2],
    pub gated_max: f64,
    /// Slack on both sides of `[1/K, 1]` for the convolution variance.
    pub conv_slack: f64,
}

impl Default for VarianceCheckConfig {
    fn default() -> Self {
        VarianceCheckConfig {
            memory: VarianceProbeConfig::default(),
            conv_channels: 32,
            conv_samples: 20_000,
            conv_logit_std: 1.0,
            ungated_band: [1.85, 2.15],
            gated_max: 1.15,
            conv_slack: 0.05,
        }
    }
}

pub fn check_variance(ctx: &Context) -> Result<RunReport, CliError> {
    let mut cfg: VarianceCheckConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.memory.seed = seed;
    }
    let mut report = RunReport::new("check-variance", &cfg, cfg.memory.seed)?;
    let start = Instant::now();
    let ungated = memory_variance_ratio(&cfg.memory, false)?;
    let gated = memory_variance_ratio(&cfg.memory, true)?;
    report.time("memory", start);
    for (tag, r) in [("ungated", &ungated), ("gated", &gated)] {
        report.metric(format!("{tag}_var_small"), r.var_small);
        report.metric(format!("{tag}_var_large"), r.var_large);
    }
    report.check("ungated_ratio", ungated.ratio, Threshold::Within(cfg.ungated_band));
    report.check("gated_ratio", gated.ratio, Threshold::AtMost(cfg.gated_max));

    let start = Instant::now();
    let k = cfg.memory.kernel;
    let conv = conv_variance(cfg.conv_channels, k, cfg.conv_samples, cfg.conv_logit_std, cfg.memory.seed)?;
    report.time("conv", start);
    report.check("conv_min_variance", conv.min, Threshold::AtLeast(1.0 / k as f64 - cfg.conv_slack));
    report.check("conv_max_variance", conv.max, Threshold::AtMost(1.0 + cfg.conv_slack));
    let gap = conv
        .variances
        .iter()
        .zip(&conv.predicted)
        .map(|(v, p)| (v - p).abs())
        .fold(0.0, f64::max);
    report.metric("conv_max_gap_to_squared_weight_sum", gap);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InfluenceCheckConfig {
    pub rows: usize,
    pub d: usize,
    pub d_state: usize,
    /// Tokens per row; influence is measured on the first.
    pub tokens: usize,
    pub symmetry_tolerance: f64,
    /// Relative agreement of the closed form with autodiff.
    pub closed_form_tolerance: f64,
    pub seed: u64,
}

impl Default for InfluenceCheckConfig {
    fn default() -> Self {
        InfluenceCheckConfig {
            rows: 16,
            d: 8,
            d_state: 4,
            tokens: 2,
            symmetry_tolerance: 1e-6,
            closed_form_tolerance: 1e-8,
            seed: 0,
        }
    }
}

fn grid(layer: &AfbmLayer, params: &ParamSet, x: &Tensor) -> Result<Vec<Vec<f64>>, CliError> {
    let b = params.bind_constant();
    Ok(influence_matrix(|v| layer.forward(&b, v), x, 0)?)
}

/// Largest increase of `I(i, i−Δ)` over growing `Δ`, relative to `I(i, i−1)`.
fn max_decay_violation(grid: &[Vec<f64>]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in grid.iter().enumerate() {
        for lag in 2..=i {
            let (near, far) = (row[i - lag + 1], row[i - lag]);
            if row[i - 1] > 0.0 {
                worst = worst.max((far - near) / row[i - 1]);
            }
        }
    }
    worst
}

pub fn check_influence(ctx: &Context) -> Result<RunReport, CliError> {
    let mut cfg: InfluenceCheckConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    if cfg.rows < 3 || cfg.tokens == 0 {
        return Err(CliError::Config {
            path: "check-influence".into(),
            message: "`rows` must be at least 3 and `tokens` positive".into(),
        });
    }
    let mut report = RunReport::new("check-influence", &cfg, cfg.seed)?;
    let start = Instant::now();
    let x = Tensor::randn(&[cfg.rows, cfg.tokens, cfg.d], 1.0, &mut RngStream::new(cfg.seed, 0x1f1));

    let (p, causal) = influence_layer(cfg.d, cfg.d_state, false, false, cfg.seed)?;
    let s = summarize_influence(&grid(&causal, &p, &x)?);
    report.check("unidirectional_future_influence", s.max_future, Threshold::Equals(0.0));
    report.metric("unidirectional_min_diagonal", s.min_diagonal);

    let (p, tied) = influence_layer(cfg.d, cfg.d_state, true, true, cfg.seed)?;
    let g = grid(&tied, &p, &x)?;
    let s = summarize_influence(&g);
    report.check("tied_asymmetry", s.max_asymmetry, Threshold::Below(cfg.symmetry_tolerance));
    let mut worst: f64 = 0.0;
    for i in 0..cfg.rows {
        for k in (0..cfg.rows).filter(|&k| k != i) {
            let cf = closed_form_influence(&tied, &p, &x, i, k, 0)?;
            worst = worst.max((cf - g[i][k]).abs() / cf.max(f64::MIN_POSITIVE));
        }
    }
    report.check("closed_form_vs_autodiff", worst, Threshold::Below(cfg.closed_form_tolerance));
    report.metric("tied_diagonal_decay_violation", max_decay_violation(&g));

    // one shared decay rate: every lag scales the same map by Ā^Δ
    let (mut p, scalar) = influence_layer(cfg.d, cfg.d_state, true, true, cfg.seed)?;
    let a_log = scalar.forward_params().a_log;
    let first = p.get(a_log).data()[0];
    p.set(a_log, Tensor::from_vec(vec![first; cfg.d_state]))?;
    let g = grid(&scalar, &p, &x)?;
    report.check("scalar_decay_monotone_violation", max_decay_violation(&g), Threshold::AtMost(0.0));

    let (p, untied) = influence_layer(cfg.d, cfg.d_state, true, false, cfg.seed)?;
    let s = summarize_influence(&grid(&untied, &p, &x)?);
    report.metric("untied_asymmetry", s.max_asymmetry);
    report.time("influence", start);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            tolerance: 1e-5,
            seed: 0,
        }
    }
}

pub fn check_grad(ctx: &Context) -> Result<RunReport, CliError> {
    let mut cfg: GradCheckConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let mut report = RunReport::new("check-grad", &cfg, cfg.seed)?;
    let start = Instant::now();
    let groups = gradcheck_tiny(cfg.seed)?;
    report.time("gradcheck", start);
    for g in groups {
        report.metric(format!("{}_grad_norm", g.group), g.analytic_norm);
        report.check(format!("{}_rel_error", g.group), g.rel_error, Threshold::Below(cfg.tolerance));
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanOracleConfig {
    pub max_rows: usize,
    pub seeds: u64,
    pub d: usize,
    pub d_state: usize,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for ScanOracleConfig {
    fn default() -> Self {
        ScanOracleConfig {
            max_rows: 32,
            seeds: 20,
            d: 4,
            d_state: 3,
            tolerance: 1e-9,
            seed: 0,
        }
    }
}

pub fn scan_oracle(ctx: &Context) -> Result<RunReport, CliError> {
    let mut cfg: ScanOracleConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    let mut report = RunReport::new("scan-oracle", &cfg, cfg.seed)?;
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for s in 0..cfg.seeds {
        for n in 1..=cfg.max_rows {
            worst = worst.max(scan_oracle_gap(n, cfg.d, cfg.d_state, cfg.seed.wrapping_add(s)));
        }
    }
    report.time("scan", start);
    report.check("max_abs_gap", worst, Threshold::Below(cfg.tolerance));
    Ok(report)
}
