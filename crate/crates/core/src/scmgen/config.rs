use serde::{Deserialize, Serialize};

use crate::embed::Task;
use crate::error::{FeatError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attachment {
    /// Parent probability proportional to out-degree + 1.
    Preferential,
    /// Parents uniformly among earlier nodes (control).
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpScope {
    All,
    Roots,
    Derived,
}

/// Every knob of the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScmGenConfig {
    /// Feature count `D` (graph nodes).
    pub features: usize,
    /// Root nodes, the first `roots` in node order.
    pub roots: usize,
    /// Sample count `N`.
    pub rows: usize,
    /// Prototype count `M`.
    pub prototypes: usize,
    /// Dirichlet concentration: one value (symmetric) or one per prototype.
    pub alpha: Vec<f64>,
    /// Parents drawn per non-root node.
    pub attach: usize,
    pub attachment: Attachment,
    pub mechanism_hidden: usize,
    /// Noise scale `σ`.
    pub noise_std: f64,
    /// Noise exponent `γ`: `Var(ε) = σ²·|x̃|^γ`.
    pub noise_exponent: f64,
    pub task: Task,
    pub teacher: TeacherKind,
    pub teacher_hidden: usize,
    /// Fraction of nodes the teacher reads.
    pub teacher_density: f64,
    /// Signal-to-noise ratio drawn log-uniformly from this interval.
    pub snr_range: [f64; 2],
    pub warp: bool,
    pub warp_scope: WarpScope,
    pub warp_a: [f64; 2],
    pub warp_b: [f64; 2],
    /// Probability that a cell is missing.
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for ScmGenConfig {
    fn default() -> Self {
        ScmGenConfig {
            features: 8,
            roots: 2,
            rows: 256,
            prototypes: 8,
            alpha: vec![1.0],
            attach: 2,
            attachment: Attachment::Preferential,
            mechanism_hidden: 8,
            noise_std: 0.1,
            noise_exponent: 1.0,
            task: Task::Classification { classes: 2 },
            teacher: TeacherKind::Mlp,
            teacher_hidden: 16,
            teacher_density: 0.25,
            snr_range: [2.0, 20.0],
            warp: true,
            warp_scope: WarpScope::All,
            warp_a: [0.5, 2.0],
            warp_b: [0.5, 2.0],
            missing_rate: 0.0,
            seed: 0,
        }
    }
}

fn positive_interval(field: &str, r: [f64; 2]) -> Result<()> {
    if r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite() {
        Ok(())
    } else {
        Err(FeatError::config(field, format!("needs 0 < lo ≤ hi < ∞, got {r:?}")))
    }
}

impl ScmGenConfig {
    pub(super) fn validate_graph(&self) -> Result<()> {
        if self.roots == 0 {
            return Err(FeatError::config("roots", "must be at least 1"));
        }
        if self.features < self.roots {
            return Err(FeatError::config("features", format!("{} features but {} roots", self.features, self.roots)));
        }
        if self.attach == 0 {
            return Err(FeatError::config("attach", "must be at least 1"));
        }
        if self.mechanism_hidden == 0 {
            return Err(FeatError::config("mechanism_hidden", "must be at least 1"));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_graph()?;
        if self.rows == 0 {
            return Err(FeatError::config("rows", "must be at least 1"));
        }
        if self.prototypes == 0 {
            return Err(FeatError::config("prototypes", "must be at least 1"));
        }
        if !(self.alpha.len() == 1 || self.alpha.len() == self.prototypes) {
            return Err(FeatError::config("alpha", "needs one value or one per prototype"));
        }
        if self.alpha.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(FeatError::config("alpha", "concentrations must be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(FeatError::config("noise_std", "must be finite and non-negative"));
        }
        if !(self.noise_exponent >= 0.0 && self.noise_exponent.is_finite()) {
            return Err(FeatError::config("noise_exponent", "must be finite and non-negative"));
        }
        if let Task::Classification { classes } = self.task {
            if classes < 2 {
                return Err(FeatError::config("task", "classification needs at least 2 classes"));
            }
        }
        if self.teacher_hidden == 0 {
            return Err(FeatError::config("teacher_hidden", "must be at least 1"));
        }
        if !(self.teacher_density > 0.0 && self.teacher_density <= 1.0) {
            return Err(FeatError::config("teacher_density", "must lie in (0, 1]"));
        }
        positive_interval("snr_range", self.snr_range)?;
        positive_interval("warp_a", self.warp_a)?;
        positive_interval("warp_b", self.warp_b)?;
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(FeatError::config("missing_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Concentration of prototype `m`.
    pub fn alpha_vector(&self) -> Vec<f64> {
        if self.alpha.len() == 1 {
            vec![self.alpha[0]; self.prototypes]
        } else {
            self.alpha.clone()
        }
    }
}
