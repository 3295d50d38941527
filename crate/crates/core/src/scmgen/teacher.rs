use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::{ScmGenConfig, TeacherKind};
use crate::embed::Task;
use crate::error::{FeatError, Result};
use crate::numerics::random::RngStream;

const MAX_ATTEMPTS: usize = 10;
const MAX_CLASS_SHARE: f64 = 0.95;

/// Sparse teacher network over the node values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub kind: TeacherKind,
    /// Nodes the teacher reads.
    pub inputs: Vec<usize>,
    pub outputs: usize,
    pub hidden: usize,
    /// Linear: `[inputs, outputs]`; MLP: `[inputs, hidden]`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// MLP only: `[hidden, outputs]`.
    pub w2: Vec<f64>,
}

impl Teacher {
    pub fn random(cfg: &ScmGenConfig, nodes: usize, outputs: usize, rng: &mut RngStream) -> Self {
        let k = ((cfg.teacher_density * nodes as f64).round() as usize).clamp(1, nodes);
        let mut inputs = sample(rng, nodes, k).into_vec();
        inputs.sort_unstable();
        let (hidden, width) = match cfg.teacher {
            TeacherKind::Linear => (0, outputs),
            TeacherKind::Mlp => (cfg.teacher_hidden, cfg.teacher_hidden),
        };
        let s1 = 1.0 / (k as f64).sqrt();
        let w1 = (0..k * width).map(|_| s1 * rng.normal()).collect();
        let b1 = (0..width).map(|_| 0.2 * rng.normal()).collect();
        let w2 = (0..hidden * outputs).map(|_| rng.normal() / (hidden as f64).sqrt()).collect();
        Teacher {
            kind: cfg.teacher,
            inputs,
            outputs,
            hidden,
            w1,
            b1,
            w2,
        }
    }

    /// Clean logits for one row of node values.
    pub fn logits(&self, row: &[f64]) -> Vec<f64> {
        let width = self.b1.len();
        let mut first = self.b1.clone();
        for (a, &node) in self.inputs.iter().enumerate() {
            for (k, f) in first.iter_mut().enumerate() {
                *f += row[node] * self.w1[a * width + k];
            }
        }
        match self.kind {
            TeacherKind::Linear => first,
            TeacherKind::Mlp => (0..self.outputs)
                .map(|c| (0..self.hidden).map(|k| first[k].tanh() * self.w2[k * self.outputs + c]).sum())
                .collect(),
        }
    }
}

/// Targets and the teacher that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Targets {
    pub y: Vec<f64>,
    pub teacher: Teacher,
    /// Realized signal-to-noise ratio of the logits.
    pub snr: f64,
    /// Teachers drawn until the class balance was acceptable.
    pub attempts: usize,
    /// Rows per class (classification only).
    pub class_counts: Vec<usize>,
}

/// Label the rows of `x` (`[N, D]`) with a random sparse teacher.
///
/// Gaussian noise with variance `Var(signal)/snr` is added to each logit.
/// Classification takes the argmax and redraws the teacher when a class is
/// absent or holds more than 95% of rows; regression returns the first
/// noisy logit, standardized.
pub fn synth_targets(x: &[f64], nodes: usize, cfg: &ScmGenConfig, rng: &mut RngStream) -> Result<Targets> {
    let n = x.len() / nodes.max(1);
    if n == 0 || x.len() != n * nodes {
        return Err(FeatError::Dimension(format!("{} values for {nodes} nodes", x.len())));
    }
    let outputs = cfg.task.classes().unwrap_or(1);
    for attempt in 1..=MAX_ATTEMPTS {
        let teacher = Teacher::random(cfg, nodes, outputs, rng);
        let clean: Vec<Vec<f64>> = x.chunks(nodes).map(|row| teacher.logits(row)).collect();
        let snr = rng.log_uniform(cfg.snr_range[0], cfg.snr_range[1]);
        let noise_std: Vec<f64> = (0..outputs)
            .map(|c| {
                let m = clean.iter().map(|l| l[c]).sum::<f64>() / n as f64;
                let v = clean.iter().map(|l| (l[c] - m).powi(2)).sum::<f64>() / n as f64;
                (v / snr).sqrt()
            })
            .collect();
        let noisy: Vec<Vec<f64>> = clean
            .iter()
            .map(|l| l.iter().zip(&noise_std).map(|(v, s)| v + s * rng.normal()).collect())
            .collect();
        match cfg.task {
            Task::Regression => {
                let mut y: Vec<f64> = noisy.iter().map(|l| l[0]).collect();
                let mean = y.iter().sum::<f64>() / n as f64;
                let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
                if sd > 0.0 {
                    y.iter_mut().for_each(|v| *v = (*v - mean) / sd);
                }
                return Ok(Targets {
                    y,
                    teacher,
                    snr,
                    attempts: attempt,
                    class_counts: Vec::new(),
                });
            }
            Task::Classification { classes } => {
                let labels: Vec<usize> = noisy.iter().map(|l| argmax(l)).collect();
                let mut counts = vec![0; classes];
                labels.iter().for_each(|&c| counts[c] += 1);
                let top = *counts.iter().max().expect("classes ≥ 2") as f64;
                if counts.iter().all(|&c| c > 0) && top <= MAX_CLASS_SHARE * n as f64 {
                    return Ok(Targets {
                        y: labels.iter().map(|&c| c as f64).collect(),
                        teacher,
                        snr,
                        attempts: attempt,
                        class_counts: counts,
                    });
                }
            }
        }
    }
    Err(FeatError::Generation(format!(
        "teacher produced a degenerate class balance {MAX_ATTEMPTS} times"
    )))
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}
