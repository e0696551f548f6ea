use std::collections::BTreeMap;

use super::{Tensor, TensorError};

/// Named weight tensor. Frozen parameters (`trainable == false`) are never
/// touched by the optimizer and keep their bit pattern for the lifetime of
/// a training run.
#[derive(Debug, Clone)]
pub struct Parameter {
    name: String,
    value: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        Self {
            name: name.into(),
            value,
            trainable,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

/// Collection of named parameters with a stable (sorted) iteration order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<(), TensorError> {
        if self.params.contains_key(param.name()) {
            return Err(TensorError::DuplicateParameter(param.name().to_string()));
        }
        self.params.insert(param.name().to_string(), param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        self.params.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    /// Total scalar count over every parameter.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Scalar count over trainable parameters only.
    pub fn trainable_param_count(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }
}
