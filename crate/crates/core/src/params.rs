//! Named parameter registry.
//!
//! All trainable tensors of a model live in one [`Params`] store in a
//! stable registration order, so the optimizer, the checkpoint writer and
//! the gradient checker all agree on which tensor is which.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Handle to one registered parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct Params<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params { names: Vec::new(), values: Vec::new() }
    }

    /// Register a tensor under a unique name.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.names.iter().any(|n| n == &name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar elements across all parameters.
    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Replace a value, keeping the shape fixed.
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::dim(format!(
                "parameter {:?} has shape {:?}, replacement has shape {:?}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Replace every value from a slice in registration order.
    pub fn set_all(&mut self, values: &[Tensor<T>]) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                self.values.len(),
                values.len()
            )));
        }
        for (i, v) in values.iter().enumerate() {
            self.set_value(ParamId(i), v.clone())?;
        }
        Ok(())
    }

    /// Clone out `(name, value)` pairs in registration order.
    pub fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }

    /// Insert every parameter into a tape as a gradient-tracked leaf.
    pub fn vars(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars { vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    /// Insert every parameter as an untracked constant, for forward-only
    /// passes: ops then skip retaining state for a backward that never
    /// comes.
    pub fn frozen_vars(&self, tape: &mut Tape<T>) -> ParamVars {
        ParamVars { vars: self.values.iter().map(|v| tape.constant(v.clone())).collect() }
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape variables for every parameter of a [`Params`] store, aligned with
/// registration order.
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn from_vars(vars: Vec<Var>) -> Self {
        ParamVars { vars }
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut p = Params::<f64>::new();
        p.add("w", Tensor::zeros(vec![2])).unwrap();
        assert!(p.add("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn set_value_checks_shape() {
        let mut p = Params::<f64>::new();
        let id = p.add("w", Tensor::zeros(vec![2, 2])).unwrap();
        assert!(p.set_value(id, Tensor::zeros(vec![4])).is_err());
        assert!(p.set_value(id, Tensor::full(vec![2, 2], 1.0)).is_ok());
        assert_eq!(p.value(id).data(), &[1.0; 4]);
    }

    #[test]
    fn total_elements_sums_all() {
        let mut p = Params::<f32>::new();
        p.add("a", Tensor::zeros(vec![2, 3])).unwrap();
        p.add("b", Tensor::zeros(vec![5])).unwrap();
        assert_eq!(p.total_elements(), 11);
    }
}
