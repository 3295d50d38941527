use serde::{Deserialize, Serialize};

use super::config::ScmGenConfig;
use super::graph::ScmGraph;
use crate::error::{FeatError, Result};
use crate::numerics::random::{sample_dirichlet, RngStream};

/// Root values as convex mixtures of Gaussian prototypes.
#[derive(Clone, Debug, PartialEq)]
pub struct RootSample {
    /// `[M, roots]`.
    pub prototypes: Vec<f64>,
    /// `[N, M]`, each row on the simplex.
    pub weights: Vec<f64>,
    /// `[N, roots]` = weights · prototypes.
    pub x: Vec<f64>,
}

pub fn init_roots(cfg: &ScmGenConfig, rng: &mut RngStream) -> Result<RootSample> {
    let (n, m, r) = (cfg.rows, cfg.prototypes, cfg.roots);
    let prototypes: Vec<f64> = (0..m * r).map(|_| rng.normal()).collect();
    let alpha = cfg.alpha_vector();
    let mut weights = Vec::with_capacity(n * m);
    for _ in 0..n {
        weights.extend(sample_dirichlet(&alpha, rng)?);
    }
    let mut x = vec![0.0; n * r];
    for i in 0..n {
        for k in 0..m {
            let w = weights[i * m + k];
            for j in 0..r {
                x[i * r + j] += w * prototypes[k * r + j];
            }
        }
    }
    Ok(RootSample { prototypes, weights, x })
}

/// Output of causal propagation; all matrices are `[N, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Propagated {
    /// Column-standardized values.
    pub x: Vec<f64>,
    /// Mechanism outputs `x̃` before noise and scaling (root values for roots).
    pub noiseless: Vec<f64>,
    /// Injected noise `ε` before scaling (zero for roots).
    pub noise: Vec<f64>,
    /// Columns that were standardized (non-constant).
    pub standardized: Vec<bool>,
}

/// Heteroscedastic draw `ε ~ N(0, σ²·|x̃|^γ)`.
pub fn heteroscedastic_noise(noiseless: f64, sigma: f64, gamma: f64, rng: &mut RngStream) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    let std = sigma * noiseless.abs().powf(0.5 * gamma);
    std * rng.normal()
}

fn standardize(col: &mut [f64]) -> bool {
    let n = col.len() as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return false;
    }
    let sd = var.sqrt();
    col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    true
}

/// Evaluate every derived node in topological order. Each column is
/// standardized as soon as it is complete, so children always read
/// unit-scale parents.
pub fn propagate(graph: &ScmGraph, roots: &RootSample, cfg: &ScmGenConfig, rng: &mut RngStream) -> Result<Propagated> {
    let (n, d, r) = (cfg.rows, graph.nodes, graph.roots);
    if roots.x.len() != n * r {
        return Err(FeatError::Dimension(format!("{} root values for {n} rows × {r} roots", roots.x.len())));
    }
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); d];
    let mut noiseless = vec![vec![0.0; n]; d];
    let mut noise = vec![vec![0.0; n]; d];
    let mut standardized = vec![false; d];
    for node in graph.topological_order()? {
        let mut col = match &graph.mechanisms[node] {
            None => (0..n).map(|i| roots.x[i * r + node]).collect::<Vec<f64>>(),
            Some(mech) => {
                let mut out = Vec::with_capacity(n);
                let mut inputs = vec![0.0; mech.parents.len()];
                for i in 0..n {
                    for (slot, &p) in inputs.iter_mut().zip(&mech.parents) {
                        *slot = cols[p][i];
                    }
                    let clean = mech.eval(&inputs);
                    let eps = heteroscedastic_noise(clean, cfg.noise_std, cfg.noise_exponent, rng);
                    noiseless[node][i] = clean;
                    noise[node][i] = eps;
                    out.push(clean + eps);
                }
                out
            }
        };
        if graph.mechanisms[node].is_none() {
            noiseless[node].copy_from_slice(&col);
        }
        if col.iter().any(|v| !v.is_finite()) {
            return Err(FeatError::Generation(format!("node {node} produced non-finite values")));
        }
        standardized[node] = standardize(&mut col);
        cols[node] = col;
    }
    let row_major = |c: &[Vec<f64>]| (0..n).flat_map(|i| c.iter().map(move |col| col[i])).collect::<Vec<f64>>();
    Ok(Propagated {
        x: row_major(&cols),
        noiseless: row_major(&noiseless),
        noise: row_major(&noise),
        standardized,
    })
}

/// Summary of the conditional noise scale, for diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub bin_centers: Vec<f64>,
    pub bin_variances: Vec<f64>,
    /// Least-squares slope of `ln Var(ε)` against `ln |x̃|`.
    pub slope: f64,
}

/// Bin `(x̃, ε)` pairs by `|x̃|` quantile and regress log variance on log
/// magnitude; the slope estimates `γ`.
pub fn noise_profile(noiseless: &[f64], noise: &[f64], bins: usize) -> Result<NoiseProfile> {
    if noiseless.len() != noise.len() || bins < 2 || noiseless.len() < 2 * bins {
        return Err(FeatError::Input("noise profile needs matching samples, ≥2 bins and ≥2 samples per bin".into()));
    }
    let mut pairs: Vec<(f64, f64)> = noiseless
        .iter()
        .zip(noise)
        .map(|(x, e)| (x.abs(), *e))
        .filter(|(m, _)| *m > 0.0)
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let per = pairs.len() / bins;
    let (mut centers, mut vars) = (Vec::new(), Vec::new());
    for b in 0..bins {
        let chunk = &pairs[b * per..if b + 1 == bins { pairs.len() } else { (b + 1) * per }];
        let m = chunk.len() as f64;
        let mean_e = chunk.iter().map(|p| p.1).sum::<f64>() / m;
        let var = chunk.iter().map(|p| (p.1 - mean_e).powi(2)).sum::<f64>() / (m - 1.0);
        centers.push(chunk.iter().map(|p| p.0).sum::<f64>() / m);
        vars.push(var);
    }
    let lx: Vec<f64> = centers.iter().map(|c| c.ln()).collect();
    let ly: Vec<f64> = vars.iter().map(|v| v.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / bins as f64, ly.iter().sum::<f64>() / bins as f64);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    Ok(NoiseProfile {
        bin_centers: centers,
        bin_variances: vars,
        slope: sxy / sxx,
    })
}
