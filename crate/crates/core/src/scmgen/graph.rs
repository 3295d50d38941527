use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Attachment, ScmGenConfig};
use crate::error::{FeatError, Result};
use crate::numerics::activations::gelu;
use crate::numerics::random::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Gelu => gelu(x),
        }
    }
}

/// Random two-layer map from a node's parents to its noiseless value:
/// `x̃ = w₂·act(W₁·pa + b₁)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mechanism {
    pub parents: Vec<usize>,
    pub activation: Activation,
    /// `[parents, hidden]`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
}

impl Mechanism {
    fn random(parents: Vec<usize>, hidden: usize, rng: &mut RngStream) -> Self {
        let p = parents.len();
        let activation = if rng.random::<bool>() { Activation::Tanh } else { Activation::Gelu };
        let s1 = 1.0 / (p as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Mechanism {
            parents,
            activation,
            w1: (0..p * hidden).map(|_| s1 * rng.normal()).collect(),
            b1: (0..hidden).map(|_| 0.5 * rng.normal()).collect(),
            w2: (0..hidden).map(|_| s2 * rng.normal()).collect(),
        }
    }

    /// Noiseless value from the parent values, in `parents` order.
    pub fn eval(&self, inputs: &[f64]) -> f64 {
        let hidden = self.b1.len();
        (0..hidden)
            .map(|k| {
                let pre = self.b1[k] + inputs.iter().enumerate().map(|(p, x)| x * self.w1[p * hidden + k]).sum::<f64>();
                self.w2[k] * self.activation.apply(pre)
            })
            .sum()
    }
}

/// DAG over feature nodes. Nodes `0..roots` have no parents; every other
/// node has at least one parent, and parents always precede children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmGraph {
    pub nodes: usize,
    pub roots: usize,
    /// `(parent, child)` pairs.
    pub edges: Vec<(usize, usize)>,
    /// `None` for roots.
    pub mechanisms: Vec<Option<Mechanism>>,
}

impl ScmGraph {
    pub fn parents(&self, node: usize) -> &[usize] {
        self.mechanisms[node].as_ref().map_or(&[], |m| m.parents.as_slice())
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes];
        for &(p, _) in &self.edges {
            deg[p] += 1;
        }
        deg
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes];
        for &(_, c) in &self.edges {
            deg[c] += 1;
        }
        deg
    }

    /// Kahn's algorithm; fails if the edge set has a cycle.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let mut indeg = self.in_degrees();
        let mut children = vec![Vec::new(); self.nodes];
        for &(p, c) in &self.edges {
            children[p].push(c);
        }
        let mut ready: Vec<usize> = (0..self.nodes).rev().filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes);
        while let Some(v) = ready.pop() {
            order.push(v);
            for &c in children[v].iter().rev() {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if order.len() != self.nodes {
            return Err(FeatError::Generation("graph has a cycle".into()));
        }
        Ok(order)
    }
}

/// Grow a DAG node by node. Each non-root node draws
/// `min(attach, earlier nodes)` distinct parents, with probability
/// proportional to `out-degree + 1` under preferential attachment.
pub fn gen_dag(cfg: &ScmGenConfig, rng: &mut RngStream) -> Result<ScmGraph> {
    cfg.validate_graph()?;
    let (d, roots) = (cfg.features, cfg.roots);
    let mut out_deg = vec![0usize; d];
    let mut edges = Vec::new();
    let mut mechanisms = vec![None; d];
    for (j, slot) in mechanisms.iter_mut().enumerate().skip(roots) {
        let k = cfg.attach.min(j);
        let mut parents = match cfg.attachment {
            Attachment::Uniform => sample(rng, j, k).into_vec(),
            Attachment::Preferential => {
                let mut weights: Vec<f64> = out_deg[..j].iter().map(|&o| o as f64 + 1.0).collect();
                let mut chosen = Vec::with_capacity(k);
                for _ in 0..k {
                    let total: f64 = weights.iter().sum();
                    let mut u = rng.random::<f64>() * total;
                    let mut pick = j - 1;
                    for (i, &w) in weights.iter().enumerate() {
                        if u < w && w > 0.0 {
                            pick = i;
                            break;
                        }
                        u -= w;
                    }
                    // rounding can leave `u` past the last weight
                    while weights[pick] == 0.0 {
                        pick -= 1;
                    }
                    weights[pick] = 0.0;
                    chosen.push(pick);
                }
                chosen
            }
        };
        parents.sort_unstable();
        for &p in &parents {
            out_deg[p] += 1;
            edges.push((p, j));
        }
        *slot = Some(Mechanism::random(parents, cfg.mechanism_hidden, rng));
    }
    Ok(ScmGraph {
        nodes: d,
        roots,
        edges,
        mechanisms,
    })
}
