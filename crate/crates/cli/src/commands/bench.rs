use std::time::Instant;

use feat::embed::{TabularDataset, Task};
use feat::model::{flop_count, FeatModel, ModelConfig, PredictOptions};
use feat::numerics::RngStream;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{config_error, Context};
use crate::error::CliError;
use crate::report::{RunReport, Threshold};

const DATA_STREAM: u64 = 0xbe;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub model: ModelConfig,
    /// Ascending sample counts.
    pub rows: Vec<usize>,
    pub cols: usize,
    pub warmups: usize,
    pub repeats: usize,
    /// Share of rows with observed labels.
    pub context_fraction: f64,
    pub chunk_rows: usize,
    /// Largest accepted `time(2N) / time(N)`.
    pub max_doubling_ratio: f64,
    /// Estimated working sets above this are reported as `-` without
    /// running; `None` uses the available system memory.
    pub memory_budget_bytes: Option<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            model: ModelConfig::default(),
            rows: vec![4096, 8192, 16384, 32768, 65536],
            cols: 20,
            warmups: 5,
            repeats: 20,
            context_fraction: 0.5,
            chunk_rows: 256,
            max_doubling_ratio: 2.4,
            memory_budget_bytes: None,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: &str| CliError::Config {
            path: "bench-latency".into(),
            message: format!("`{field}`: {msg}"),
        };
        if self.rows.is_empty() || self.rows.windows(2).any(|w| w[0] >= w[1]) || self.rows[0] < 2 {
            return Err(bad("rows", "needs strictly ascending sample counts of at least 2"));
        }
        if self.cols == 0 {
            return Err(bad("cols", "must be positive"));
        }
        if self.repeats == 0 {
            return Err(bad("repeats", "must be positive"));
        }
        if !(self.context_fraction > 0.0 && self.context_fraction <= 1.0) {
            return Err(bad("context_fraction", "must lie in (0, 1]"));
        }
        self.model.validate().map_err(|e| config_error("bench-latency", e))
    }
}

/// Upper estimate of resident bytes for one inference pass.
pub fn working_set_bytes(cfg: &ModelConfig, n: usize, cols: usize, workers: usize) -> u64 {
    let (n, t, d, s) = (n as u64, cols as u64 + 1, cfg.d as u64, cfg.d_state as u64);
    // cell buffer and its tensor copy, plus per-column scan temporaries
    8 * (2 * n * t * d + workers as u64 * n * d * (2 * s + 16))
}

fn available_memory() -> Option<u64> {
    let info = std::fs::read_to_string("/proc/meminfo").ok()?;
    let line = info.lines().find(|l| l.starts_with("MemAvailable:"))?;
    let kib: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kib * 1024)
}

fn random_table(n: usize, cols: usize, context: f64, seed: u64) -> Result<TabularDataset, CliError> {
    let mut rng = RngStream::new(seed, DATA_STREAM);
    let x: Vec<f64> = (0..n * cols).map(|_| rng.normal()).collect();
    let labeled = ((context * n as f64).round() as usize).clamp(1, n);
    let y = (0..n).map(|i| (i < labeled).then(|| f64::from(rng.random::<bool>()))).collect();
    Ok(TabularDataset::from_dense(n, cols, x, y, Task::Classification { classes: 2 })?)
}

/// Exact test that `flops(N)` is affine in `N` over the grid.
pub fn exactly_affine(points: &[(usize, u128)]) -> bool {
    points.windows(3).all(|w| {
        let (n0, f0) = (w[0].0 as i128, w[0].1 as i128);
        let (n1, f1) = (w[1].0 as i128, w[1].1 as i128);
        let (n2, f2) = (w[2].0 as i128, w[2].1 as i128);
        (f1 - f0) * (n2 - n0) == (f2 - f0) * (n1 - n0)
    })
}

/// Least-squares quadratic coefficient of `y` on `x`, in centered and
/// scaled coordinates.
pub fn quadratic_coefficient(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 3 {
        return 0.0;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let sx = points.iter().map(|p| (p.0 - mx).abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let sy = points.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    // normal equations for [1, u, u²]
    let mut a = [[0.0; 4]; 3];
    for &(x, y) in points {
        let u = (x - mx) / sx;
        let basis = [1.0, u, u * u];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += basis[r] * basis[c];
            }
            a[r][3] += basis[r] * y / sy;
        }
    }
    for p in 0..3 {
        let pivot = (p..3).max_by(|&i, &j| a[i][p].abs().total_cmp(&a[j][p].abs())).unwrap_or(p);
        a.swap(p, pivot);
        for r in 0..3 {
            if r != p && a[p][p] != 0.0 {
                let f = a[r][p] / a[p][p];
                for c in p..4 {
                    a[r][c] -= f * a[p][c];
                }
            }
        }
    }
    if a[2][2] == 0.0 {
        0.0
    } else {
        a[2][3] / a[2][2]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyRow {
    pub n: usize,
    /// `None` when the pass did not fit in memory.
    pub timing: Option<(f64, f64)>,
    pub flops: u128,
}

pub fn latency_csv(rows: &[LatencyRow]) -> String {
    let mut out = String::from("N,mean_ms,std_ms,flops\n");
    for r in rows {
        match r.timing {
            Some((mean, std)) => out.push_str(&format!("{},{mean:.3},{std:.3},{}\n", r.n, r.flops)),
            None => out.push_str(&format!("{},-,-,{}\n", r.n, r.flops)),
        }
    }
    out
}

/// Forward-only latency over a grid of sample counts, with analytic flop
/// counts, on a pool of `--threads` workers (one by default).
pub fn run(ctx: &Context) -> Result<RunReport, CliError> {
    let mut cfg: BenchConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.model.seed = seed;
    }
    cfg.validate()?;
    let workers = ctx.threads.unwrap_or(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let budget = cfg.memory_budget_bytes.or_else(available_memory).unwrap_or(u64::MAX);
    let model = FeatModel::new(cfg.model.clone()).map_err(|e| config_error("bench-latency", e))?;
    let opts = PredictOptions {
        chunk_rows: cfg.chunk_rows,
        impute: false,
    };
    let mut report = RunReport::new("bench-latency", &cfg, cfg.model.seed)?;
    // Sizes are timed round-robin so slow drift in machine speed lands on
    // every size alike instead of biasing the doubling ratios.
    let mut tables = Vec::with_capacity(cfg.rows.len());
    for &n in &cfg.rows {
        let fits = working_set_bytes(&cfg.model, n, cfg.cols, workers) <= budget;
        let ds = if fits {
            Some(random_table(n, cfg.cols, cfg.context_fraction, cfg.model.seed ^ n as u64)?)
        } else {
            None
        };
        tables.push(ds);
    }
    let mut times: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.repeats); cfg.rows.len()];
    pool.install(|| -> Result<(), CliError> {
        let mut rng = RngStream::new(cfg.model.seed, DATA_STREAM + 1);
        for k in 0..cfg.warmups + cfg.repeats {
            for (ds, t) in tables.iter().zip(times.iter_mut()) {
                let Some(ds) = ds else { continue };
                let start = Instant::now();
                std::hint::black_box(model.predict(ds, &mut rng, opts)?);
                if k >= cfg.warmups {
                    t.push(start.elapsed().as_secs_f64() * 1e3);
                }
            }
        }
        Ok(())
    })?;
    let mut rows = Vec::with_capacity(cfg.rows.len());
    for ((&n, ds), times) in cfg.rows.iter().zip(&tables).zip(&times) {
        let flops = flop_count(&cfg.model, n, cfg.cols).total();
        if ds.is_none() {
            rows.push(LatencyRow { n, timing: None, flops });
            continue;
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len().max(2) - 1) as f64;
        report.wall_times.insert(format!("n{n}_ms"), mean);
        rows.push(LatencyRow {
            n,
            timing: Some((mean, var.sqrt())),
            flops,
        });
    }
    report.artifact(&ctx.write("latency.csv", latency_csv(&rows))?);

    let points: Vec<(usize, u128)> = rows.iter().map(|r| (r.n, r.flops)).collect();
    report.check("flops_affine_in_n", f64::from(u8::from(exactly_affine(&points))), Threshold::Equals(1.0));
    let fp: Vec<(f64, f64)> = points.iter().map(|&(n, f)| (n as f64, f as f64)).collect();
    report.metric("flops_quadratic_coefficient", quadratic_coefficient(&fp));
    let per_sample = flop_count(&cfg.model, 2, cfg.cols).per_sample() / 2;
    report.metric("flops_per_sample", per_sample as f64);
    for w in rows.windows(2) {
        if w[1].n != 2 * w[0].n {
            continue;
        }
        if let (Some((t0, _)), Some((t1, _))) = (w[0].timing, w[1].timing) {
            report.check(
                format!("time_ratio_{}_{}", w[1].n, w[0].n),
                t1 / t0,
                Threshold::AtMost(cfg.max_doubling_ratio),
            );
        }
    }
    report.metric("skipped_sizes", rows.iter().filter(|r| r.timing.is_none()).count() as f64);
    report.metric("workers", workers as f64);
    Ok(report)
}
