//! Named trainable parameters.

use std::collections::HashMap;

use rand::Rng;

use super::graph::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Owns every parameter of a model. Names are unique.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        tensor.grad = None;
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            tensor: tensor.with_grad(),
        });
        Ok(ParamId(id))
    }

    /// Adds a weight drawn uniformly from ±1/sqrt(fan_in).
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..shape.numel())
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        self.add(name, Tensor::from_vec(shape, data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn numel(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|&id| self.tensor(id).numel()).sum()
    }

    pub fn set_requires_grad(&mut self, ids: &[ParamId], flag: bool) {
        for &id in ids {
            self.params[id.0].tensor.requires_grad = flag;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Adds the adjoints recorded on `graph` into the parameter grads.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for (id, grad) in graph.param_grads() {
            self.params[id.0].tensor.accumulate_grad(grad);
        }
    }

    /// Concatenated values of `ids`.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<f64> {
        ids.iter()
            .flat_map(|&id| self.tensor(id).data().iter().copied())
            .collect()
    }

    /// Concatenated grads of `ids` (zeros where no grad was recorded).
    pub fn flat_grads(&self, ids: &[ParamId]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel(ids));
        for &id in ids {
            let t = self.tensor(id);
            match &t.grad {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }

    /// Writes a flat vector back into the parameters `ids`.
    pub fn assign(&mut self, ids: &[ParamId], flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel(ids) {
            return Err(Error::Shape(format!(
                "flat vector of length {} does not match {} parameter entries",
                flat.len(),
                self.numel(ids)
            )));
        }
        let mut off = 0;
        for &id in ids {
            let data = self.params[id.0].tensor.data_mut();
            let n = data.len();
            data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
