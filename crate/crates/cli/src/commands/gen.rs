use std::time::Instant;

use feat::embed::Task;
use feat::scmgen::{gen_dataset, ScmGenConfig};

use super::{config_error, pretty_json, Context};
use crate::error::CliError;
use crate::report::RunReport;
use crate::table::{table_csv, Sidecar, TaskKind};

/// Generate one synthetic table: `data.csv`, its sidecar `data.json`, and
/// the generator trace `meta.json`.
pub fn run(ctx: &Context) -> Result<RunReport, CliError> {
    let mut cfg: ScmGenConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| config_error("gen", e))?;
    let start = Instant::now();
    let g = gen_dataset(&cfg)?;
    let ds = &g.dataset;
    let features: Vec<String> = (0..ds.cols()).map(|j| format!("x{j}")).collect();
    let sidecar = Sidecar {
        target: "y".into(),
        task: match ds.task() {
            Task::Classification { .. } => TaskKind::Classification,
            Task::Regression => TaskKind::Regression,
        },
        classes: ds.task().classes(),
    };
    let mut report = RunReport::new("gen", &cfg, cfg.seed)?;
    report.artifact(&ctx.write("data.csv", table_csv(ds, &features, "y")?)?);
    report.artifact(&ctx.write("data.json", pretty_json(&sidecar)?)?);
    report.artifact(&ctx.write("meta.json", pretty_json(&g.meta)?)?);
    report.time("generate", start);
    report.metric("rows", ds.rows() as f64);
    report.metric("cols", ds.cols() as f64);
    report.metric("edges", g.graph.edges.len() as f64);
    report.metric("missing_cells", g.meta.missing_cells as f64);
    report.metric("regenerations", g.meta.regenerations as f64);
    Ok(report)
}
