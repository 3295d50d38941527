//! Synthetic tabular tasks from random structural causal models: a
//! preferential-attachment DAG, prototype-mixture roots, heteroscedastic
//! propagation, sparse-teacher targets and rank-preserving marginal warps.

mod config;
mod graph;
mod sampling;
pub mod stats;
mod teacher;
mod warp;

pub use config::{Attachment, ScmGenConfig, TeacherKind, WarpScope};
pub use graph::{gen_dag, Activation, Mechanism, ScmGraph};
pub use sampling::{heteroscedastic_noise, init_roots, noise_profile, propagate, NoiseProfile, Propagated, RootSample};
pub use teacher::{argmax, synth_targets, Targets, Teacher};
pub use warp::{kumaraswamy_warp, mid_ranks, warp_column, ColumnWarp};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::TabularDataset;
use crate::error::{FeatError, Result};
use crate::numerics::random::RngStream;

const MAX_REGENERATIONS: u64 = 10;

const GRAPH_STREAM: u64 = 1;
const ROOT_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;
const TEACHER_STREAM: u64 = 4;
const WARP_STREAM: u64 = 5;
const MISSING_STREAM: u64 = 6;

/// Everything needed to describe a generated task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenMeta {
    pub config: ScmGenConfig,
    pub edges: Vec<(usize, usize)>,
    pub roots: usize,
    pub activations: Vec<Option<Activation>>,
    pub teacher_inputs: Vec<usize>,
    pub snr: f64,
    pub teacher_attempts: usize,
    pub class_counts: Vec<usize>,
    pub warps: Vec<ColumnWarp>,
    /// Columns are standardized during propagation.
    pub standardized: bool,
    /// Runs discarded for non-finite values before this one.
    pub regenerations: u64,
    pub missing_cells: usize,
}

#[derive(Clone, Debug)]
pub struct Generated {
    pub dataset: TabularDataset,
    pub graph: ScmGraph,
    pub meta: GenMeta,
}

/// Run the full pipeline. Deterministic in `cfg` (including its seed).
pub fn gen_dataset(cfg: &ScmGenConfig) -> Result<Generated> {
    cfg.validate()?;
    let mut last = None;
    for regen in 0..MAX_REGENERATIONS {
        let seed = if regen == 0 { cfg.seed } else { cfg.seed ^ regen.wrapping_mul(0x9e37_79b9_7f4a_7c15) };
        match attempt(cfg, seed, regen) {
            Err(FeatError::Generation(m)) if m.contains("non-finite") => last = Some(m),
            other => return other,
        }
    }
    Err(FeatError::Generation(format!(
        "{MAX_REGENERATIONS} regenerations all failed: {}",
        last.unwrap_or_default()
    )))
}

fn attempt(cfg: &ScmGenConfig, seed: u64, regenerations: u64) -> Result<Generated> {
    let graph = gen_dag(cfg, &mut RngStream::new(seed, GRAPH_STREAM))?;
    let roots = init_roots(cfg, &mut RngStream::new(seed, ROOT_STREAM))?;
    let prop = propagate(&graph, &roots, cfg, &mut RngStream::new(seed, NOISE_STREAM))?;
    let targets = synth_targets(&prop.x, graph.nodes, cfg, &mut RngStream::new(seed, TEACHER_STREAM))?;
    let d = graph.nodes;
    let mut x = prop.x;
    let warps = if cfg.warp {
        let columns: Vec<usize> = (0..d)
            .filter(|&j| match cfg.warp_scope {
                WarpScope::All => true,
                WarpScope::Roots => j < graph.roots,
                WarpScope::Derived => j >= graph.roots,
            })
            .collect();
        kumaraswamy_warp(&mut x, d, &columns, cfg.warp_a, cfg.warp_b, &mut RngStream::new(seed, WARP_STREAM))?
    } else {
        Vec::new()
    };
    let mut observed = vec![true; x.len()];
    if cfg.missing_rate > 0.0 {
        let mut rng = RngStream::new(seed, MISSING_STREAM);
        observed.iter_mut().for_each(|o| *o = rng.random::<f64>() >= cfg.missing_rate);
    }
    let missing_cells = observed.iter().filter(|o| !**o).count();
    let y_observed = vec![true; cfg.rows];
    let dataset = TabularDataset::new(cfg.rows, d, x, observed, targets.y.clone(), y_observed, cfg.task)?;
    let meta = GenMeta {
        config: cfg.clone(),
        edges: graph.edges.clone(),
        roots: graph.roots,
        activations: graph.mechanisms.iter().map(|m| m.as_ref().map(|m| m.activation)).collect(),
        teacher_inputs: targets.teacher.inputs.clone(),
        snr: targets.snr,
        teacher_attempts: targets.attempts,
        class_counts: targets.class_counts.clone(),
        warps,
        standardized: true,
        regenerations,
        missing_cells,
    };
    Ok(Generated { dataset, graph, meta })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::Task;

    #[test]
    fn edgeless_when_all_nodes_are_roots() {
        let cfg = ScmGenConfig { features: 5, roots: 5, ..Default::default() };
        let g = gen_dag(&cfg, &mut RngStream::new(0, 0)).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn single_attachment_gives_a_forest_of_trees() {
        let cfg = ScmGenConfig { features: 40, roots: 1, attach: 1, ..Default::default() };
        let g = gen_dag(&cfg, &mut RngStream::new(3, 0)).unwrap();
        assert_eq!(g.edges.len(), 39);
        assert!(g.in_degrees()[1..].iter().all(|&k| k == 1));
    }

    #[test]
    fn dag_invariants() {
        for seed in 0..20 {
            let cfg = ScmGenConfig { features: 30, roots: 3, attach: 3, ..Default::default() };
            let g = gen_dag(&cfg, &mut RngStream::new(seed, 0)).unwrap();
            assert!(g.topological_order().is_ok());
            assert!(g.edges.iter().all(|&(p, c)| p < c));
            let indeg = g.in_degrees();
            assert!(indeg[..3].iter().all(|&k| k == 0));
            assert!(indeg[3..].iter().all(|&k| k >= 1));
        }
    }

    #[test]
    fn cycle_is_detected() {
        let mut g = gen_dag(&ScmGenConfig::default(), &mut RngStream::new(0, 0)).unwrap();
        g.edges.push((7, 0));
        assert!(g.topological_order().is_err());
    }

    #[test]
    fn single_prototype_gives_identical_roots() {
        let cfg = ScmGenConfig { prototypes: 1, rows: 10, roots: 3, ..Default::default() };
        let r = init_roots(&cfg, &mut RngStream::new(0, 0)).unwrap();
        for i in 0..10 {
            assert_eq!(&r.x[i * 3..i * 3 + 3], &r.prototypes[..]);
        }
    }

    #[test]
    fn noiseless_mechanisms_are_deterministic_in_their_inputs() {
        let cfg = ScmGenConfig { noise_std: 0.0, rows: 6, prototypes: 1, ..Default::default() };
        let g = gen_dag(&cfg, &mut RngStream::new(1, 0)).unwrap();
        let roots = init_roots(&cfg, &mut RngStream::new(1, 1)).unwrap();
        let p = propagate(&g, &roots, &cfg, &mut RngStream::new(1, 2)).unwrap();
        assert!(p.noise.iter().all(|&e| e == 0.0));
        let d = g.nodes;
        for i in 1..6 {
            assert_eq!(p.noiseless[..d], p.noiseless[i * d..(i + 1) * d]);
        }
    }

    #[test]
    fn classification_targets_cover_every_class() {
        let cfg = ScmGenConfig { task: Task::Classification { classes: 4 }, rows: 400, ..Default::default() };
        let g = gen_dataset(&cfg).unwrap();
        assert!(g.meta.class_counts.iter().all(|&c| c > 0));
        assert_eq!(g.meta.class_counts.iter().sum::<usize>(), 400);
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = ScmGenConfig { missing_rate: 0.1, ..Default::default() };
        let a = gen_dataset(&cfg).unwrap();
        let b = gen_dataset(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.meta, b.meta);
    }

    #[test]
    fn shapes_and_missingness() {
        let cfg = ScmGenConfig { rows: 50, features: 6, missing_rate: 0.2, ..Default::default() };
        let g = gen_dataset(&cfg).unwrap();
        assert_eq!((g.dataset.rows(), g.dataset.cols()), (50, 6));
        assert_eq!(g.dataset.y().len(), 50);
        let missing = g.dataset.observed().iter().filter(|o| !**o).count();
        assert_eq!(missing, g.meta.missing_cells);
        assert!(missing > 20 && missing < 100);
    }

    #[test]
    fn warp_identity_shape_gives_standardized_uniform_ranks() {
        let x = [3.0, -1.0, 2.0, 2.0, 10.0];
        let w = warp_column(&x, 1.0, 1.0).unwrap().unwrap();
        let u: Vec<f64> = mid_ranks(&x).iter().map(|r| (r - 0.5) / 5.0).collect();
        let m = stats::mean(&u);
        let sd = (u.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 5.0).sqrt();
        for (a, b) in w.iter().zip(&u) {
            assert!((a - (b - m) / sd).abs() < 1e-12);
        }
        assert_eq!(stats::spearman(&x, &w), 1.0);
    }

    #[test]
    fn constant_columns_are_skipped() {
        assert_eq!(warp_column(&[2.0; 4], 0.5, 0.5).unwrap(), None);
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[5.0, 1.0, 5.0, 0.0]), vec![3.5, 2.0, 3.5, 1.0]);
    }

    #[test]
    fn invalid_configs_name_their_field() {
        let bad = [
            ("roots", ScmGenConfig { roots: 0, ..Default::default() }),
            ("features", ScmGenConfig { features: 1, roots: 2, ..Default::default() }),
            ("alpha", ScmGenConfig { alpha: vec![1.0, 2.0], ..Default::default() }),
            ("snr_range", ScmGenConfig { snr_range: [0.0, 1.0], ..Default::default() }),
            ("missing_rate", ScmGenConfig { missing_rate: 1.0, ..Default::default() }),
        ];
        for (field, cfg) in bad {
            match gen_dataset(&cfg) {
                Err(FeatError::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("{field}: {other:?}"),
            }
        }
    }
}
