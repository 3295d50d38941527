use std::time::Instant;

use feat::model::{save, ModelConfig};
use feat::scmgen::ScmGenConfig;
use feat::train::{save_loss_csv, train_toy, TrainConfig};
use serde::{Deserialize, Serialize};

use super::{config_error, Context};
use crate::error::CliError;
use crate::report::{RunReport, Threshold};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub model: ModelConfig,
    pub generator: ScmGenConfig,
    pub train: TrainConfig,
    /// Steps averaged at each end of the loss curve.
    pub window: Option<usize>,
    /// Last step of the late window; defaults to the final step.
    pub horizon: Option<usize>,
}

/// Train a model on the synthetic stream; writes `loss.csv` and
/// `model.ckpt`.
pub fn run(ctx: &Context) -> Result<RunReport, CliError> {
    let mut cfg: ToyConfig = ctx.load()?;
    if let Some(seed) = ctx.seed {
        cfg.model.seed = seed;
        cfg.generator.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.model.validate().map_err(|e| config_error("model", e))?;
    cfg.generator.validate().map_err(|e| config_error("generator", e))?;
    cfg.train.validate().map_err(|e| config_error("train", e))?;
    let steps = cfg.train.steps;
    let horizon = cfg.horizon.unwrap_or(steps);
    if horizon > steps {
        return Err(CliError::Config {
            path: "horizon".into(),
            message: format!("{horizon} exceeds the {steps} training steps"),
        });
    }
    let mut report = RunReport::new("train-toy", &cfg, cfg.train.seed)?;
    let start = Instant::now();
    let (model, outcome) = train_toy(&cfg.model, &cfg.generator, &cfg.train)?;
    report.time("train", start);

    let loss = ctx.out_dir()?.join("loss.csv");
    save_loss_csv(&outcome.records, &loss)?;
    report.artifact(&loss);
    let ckpt = ctx.out_dir()?.join("model.ckpt");
    save(&model, &ckpt)?;
    report.artifact(&ckpt);

    let window = cfg.window.unwrap_or(20);
    report.metric("skipped_steps", outcome.skipped.len() as f64);
    if window > 0 && horizon >= 2 * window {
        let early = outcome.mean_total(1, window);
        let late = outcome.mean_total(horizon - window + 1, horizon);
        report.metric("early_mean_loss", early);
        report.metric("late_mean_loss", late);
        report.check("late_minus_early_loss", late - early, Threshold::Below(0.0));
        if horizon < steps && steps >= window {
            report.metric("final_mean_loss", outcome.mean_total(steps - window + 1, steps));
        }
    }
    Ok(report)
}
