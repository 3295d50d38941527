//! Named parameter storage and its binding to autodiff values.

use std::collections::HashMap;
use std::ops::Index;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{FeatError, Result};
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::random::RngStream;
use crate::numerics::tensor::Tensor;

/// Handle to one tensor in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named parameter tensors. Insertion order is the serialization
/// order and never changes after construction.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(FeatError::Contract(format!("duplicate parameter name `{name}`")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    /// Replace a tensor; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            return Err(FeatError::Dimension(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.tensors.iter().map(|t| (**t).clone()).collect()
    }

    /// Untracked values for inference.
    pub fn bind_constant(&self) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| Var::from_arc(Arc::clone(t))).collect(),
        }
    }

    /// Every parameter as a leaf on `tape`.
    pub fn bind_on(&self, tape: &Rc<Tape>) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf_arc(Arc::clone(t))).collect(),
        }
    }
}

/// Parameter values for one forward pass, indexed by [`ParamId`].
#[derive(Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Gaussian draw with variance `2 / (fan_in + fan_out)`.
pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(shape, std, rng)
}
