use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Insertion-ordered collection of parameters with unique names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name '{name}'")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient slot.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(Error::usage(format!(
                "gradient shape {:?} does not match parameter '{}' shape {:?}",
                grad.shape(),
                p.name,
                p.value.shape()
            )));
        }
        match &mut p.grad {
            Some(g) => g.add_assign(grad),
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Multiplies every stored gradient by `s`.
    pub fn scale_grads(&mut self, s: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}
