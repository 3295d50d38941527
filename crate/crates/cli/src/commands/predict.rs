use std::path::PathBuf;
use std::time::Instant;

use feat::model::{load, PredictOptions};
use feat::numerics::RngStream;
use serde::{Deserialize, Serialize};

use super::Context;
use crate::error::CliError;
use crate::report::{RunReport, Threshold};
use crate::table::{read_table, Sidecar};

const PREDICT_STREAM: u64 = 0x9e;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub options: PredictOptions,
    /// Largest tolerated `|Σp − 1|` per classified row.
    pub probability_tolerance: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PredictArgs {
    pub data: PathBuf,
    pub sidecar: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub impute: bool,
}

/// In-context prediction for every row with an empty target field.
pub fn run(ctx: &Context, args: &PredictArgs) -> Result<RunReport, CliError> {
    let mut cfg: PredictConfig = ctx.load()?;
    cfg.options.impute |= args.impute;
    let seed = ctx.seed.unwrap_or(0);
    let sidecar_path = args.sidecar.clone().unwrap_or_else(|| args.data.with_extension("json"));
    let sidecar = Sidecar::read(&sidecar_path)?;
    let table = read_table(&args.data, &sidecar)?;
    let model = load(&args.checkpoint)?;

    let start = Instant::now();
    let pred = model.predict(&table.dataset, &mut RngStream::new(seed, PREDICT_STREAM), cfg.options)?;
    let mut report = RunReport::new("predict", &cfg, seed)?;
    report.time("predict", start);

    let mut w = csv::Writer::from_writer(Vec::new());
    let internal = |e: csv::Error| CliError::Internal(e.to_string());
    let mut worst: f64 = 0.0;
    if let (Some(probs), Some(classes)) = (&pred.probabilities, pred.classes()) {
        let c = probs.first().map_or(0, Vec::len);
        let header: Vec<String> = ["row".to_string(), "prediction".to_string()]
            .into_iter()
            .chain((0..c).map(|k| format!("p{k}")))
            .collect();
        w.write_record(&header).map_err(internal)?;
        for ((row, p), class) in pred.query_rows.iter().zip(probs).zip(&classes) {
            worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
            let record: Vec<String> = [row.to_string(), class.to_string()]
                .into_iter()
                .chain(p.iter().map(f64::to_string))
                .collect();
            w.write_record(&record).map_err(internal)?;
        }
        report.check(
            "probabilities_sum_to_one",
            worst,
            Threshold::AtMost(cfg.probability_tolerance.unwrap_or(1e-12)),
        );
    } else if let Some(values) = &pred.regression {
        w.write_record(["row", "prediction"]).map_err(internal)?;
        for (row, v) in pred.query_rows.iter().zip(values) {
            w.write_record([row.to_string(), v.to_string()]).map_err(internal)?;
        }
        let bad = values.iter().filter(|v| !v.is_finite()).count();
        report.check("non_finite_predictions", bad as f64, Threshold::Equals(0.0));
    }
    let text = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
    report.artifact(&ctx.write("predictions.csv", text)?);

    if cfg.options.impute {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "column", "value"]).map_err(internal)?;
        for cell in &pred.imputed {
            w.write_record([cell.row.to_string(), table.features[cell.col].clone(), cell.value.to_string()])
                .map_err(internal)?;
        }
        let text = w.into_inner().map_err(|e| CliError::Internal(e.to_string()))?;
        report.artifact(&ctx.write("imputed.csv", text)?);
        report.metric("imputed_cells", pred.imputed.len() as f64);
    }
    report.metric("context_rows", table.dataset.context_rows().len() as f64);
    report.metric("query_rows", pred.query_rows.len() as f64);
    report.metric("identities_orthonormal", f64::from(u8::from(pred.identities_orthonormal)));
    Ok(report)
}
