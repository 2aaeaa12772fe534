use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Same shape as `value`; accumulated by backward, cleared by the optimizer.
    pub grad: Tensor,
}

/// Ordered, named parameter set. Order is the registration order and is
/// what checkpoints and optimizer state are keyed on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name: name.into(), value, grad });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replace every value, checking count and shapes.
    pub fn set_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            bail!(Shape, "expected {} parameter tensors, got {}", self.params.len(), values.len());
        }
        for (p, v) in self.params.iter().zip(values) {
            if p.value.shape() != v.shape() {
                bail!(Shape, "parameter `{}`: shape {:?} vs {:?}", p.name, p.value.shape(), v.shape());
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v.clone();
        }
        Ok(())
    }
}
