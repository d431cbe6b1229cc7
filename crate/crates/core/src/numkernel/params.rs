use std::collections::HashMap;

use super::tape::Tape;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        tensor.requires_grad = true;
        tensor.grad = None;
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Ids of every parameter whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.ids().filter(|id| self.names[id.0].starts_with(prefix)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.tensors
            .iter()
            .enumerate()
            .map(move |(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Adds the gradients of every parameter bound on `tape` into the
    /// parameter grad buffers. Call after [`Tape::backward`].
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (id, grad) in tape.param_grads() {
            let t = &mut self.tensors[id.0];
            match &mut t.grad {
                Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += *b),
                None => t.grad = Some(grad.to_vec()),
            }
        }
    }

    /// Gives every listed parameter a zero gradient if it has none, for
    /// parameters a particular batch happened not to touch.
    pub fn ensure_grads(&mut self, ids: &[ParamId]) {
        for id in ids {
            let t = &mut self.tensors[id.0];
            if t.grad.is_none() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    pub fn grad(&self, id: ParamId) -> Option<&[Scalar]> {
        self.tensors[id.0].grad.as_deref()
    }

    /// Replaces the values of an existing parameter, keeping its shape.
    pub fn set_data(&mut self, id: ParamId, data: Vec<Scalar>) -> Result<()> {
        let t = &self.tensors[id.0];
        if t.numel() != data.len() {
            return Err(Error::InvalidShape(format!(
                "parameter `{}` holds {} values, got {}",
                self.names[id.0],
                t.numel(),
                data.len()
            )));
        }
        let shape = t.shape().to_vec();
        let mut fresh = Tensor::from_parts(shape, data);
        fresh.requires_grad = true;
        self.tensors[id.0] = fresh;
        Ok(())
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}
