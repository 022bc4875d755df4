//! Named parameter trees.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{numel, Scalar, Tensor};

/// What a parameter tensor is for; drives initialisation and statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Linear or convolution weight with its fan-in/fan-out (`c · k²`).
    Weight { fan_in: usize, fan_out: usize },
    Bias,
    NormGain,
    NormBias,
    /// Per-head log temperature of cosine attention.
    LogScale,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    /// Lives inside a residual branch of a transformer layer.
    pub residual_branch: bool,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub(crate) fn linear(name: String, cin: usize, cout: usize, residual: bool) -> Self {
        Self {
            name,
            shape: vec![cin, cout],
            role: Role::Weight {
                fan_in: cin,
                fan_out: cout,
            },
            residual_branch: residual,
        }
    }

    pub(crate) fn conv(name: String, k: usize, cin: usize, cout: usize, residual: bool) -> Self {
        Self {
            name,
            shape: vec![k, k, cin, cout],
            role: Role::Weight {
                fan_in: cin * k * k,
                fan_out: cout * k * k,
            },
            residual_branch: residual,
        }
    }

    pub(crate) fn bias(name: String, n: usize, residual: bool) -> Self {
        Self {
            name,
            shape: vec![n],
            role: Role::Bias,
            residual_branch: residual,
        }
    }
}

/// Weight followed by its bias, named `{prefix}.weight` / `{prefix}.bias`.
pub(crate) fn linear_specs(prefix: &str, cin: usize, cout: usize, residual: bool) -> [ParamSpec; 2] {
    [
        ParamSpec::linear(format!("{prefix}.weight"), cin, cout, residual),
        ParamSpec::bias(format!("{prefix}.bias"), cout, residual),
    ]
}

pub(crate) fn conv_specs(prefix: &str, k: usize, cin: usize, cout: usize, residual: bool) -> [ParamSpec; 2] {
    [
        ParamSpec::conv(format!("{prefix}.weight"), k, cin, cout, residual),
        ParamSpec::bias(format!("{prefix}.bias"), cout, residual),
    ]
}

pub(crate) fn norm_specs(prefix: &str, c: usize) -> [ParamSpec; 2] {
    [
        ParamSpec {
            name: format!("{prefix}.gain"),
            shape: vec![c],
            role: Role::NormGain,
            residual_branch: false,
        },
        ParamSpec {
            name: format!("{prefix}.bias"),
            shape: vec![c],
            role: Role::NormBias,
            residual_branch: false,
        },
    ]
}

/// Parameters keyed by dotted name, iterated in byte-lexicographic order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Records every tensor as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }

    /// Checks names and shapes against a declared layout.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            let t = self.get(&spec.name)?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Dimension {
                    op: "parameter",
                    lhs: spec.shape.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

/// Parameter leaves recorded on a graph.
#[derive(Debug, Clone, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Binds existing graph variables under the given names.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of every bound parameter, zero where none flowed.
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>, grads: &mut Gradients<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            let t = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
            out.insert(name.clone(), t);
        }
        out
    }
}
