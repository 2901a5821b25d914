use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub requires_grad: bool,
}

/// Named learnable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            requires_grad: true,
        });
        id
    }

    /// Registers a parameter drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.add(name, Tensor::uniform(shape, -bound, bound, rng))
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

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the parameter gradients recorded in `grads` to the stored ones.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.accumulate_raw(id, g);
        }
    }

    pub(crate) fn accumulate_raw(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        if !p.requires_grad {
            return;
        }
        let grad = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (acc, v) in grad.data_mut().iter_mut().zip(g) {
            *acc += v;
        }
    }

    /// Replaces every value with the one of the same name in `other`.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for p in &mut self.params {
            let src = other
                .find(&p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{}`", p.name)))?;
            let src = other.value(src);
            if src.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load",
                    lhs: p.value.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            p.value = src.clone();
        }
        Ok(())
    }
}
