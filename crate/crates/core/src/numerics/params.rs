use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::{Scalar, Tensor};

/// A trainable tensor with its gradient accumulator and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub first_moment: Tensor<T>,
    pub second_moment: Tensor<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Param {
            grad: zeros.clone(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            value,
        }
    }
}

/// Named parameters in deterministic (lexicographic) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Param<T>>,
    /// Number of optimizer steps applied so far.
    pub step: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, Param::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))
    }

    /// Adds `grad` into the accumulator of `name`.
    pub fn accumulate(&mut self, name: &str, grad: &Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter {name}")))?;
        if p.grad.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient for {name} has shape {:?}, parameter is {:?}",
                grad.shape(),
                p.grad.shape()
            )));
        }
        p.grad.add_assign(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn scale_grad(&mut self, factor: T) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values over all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Copy with values converted to another precision; optimizer state is reset.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), Param::new(p.value.cast())))
                .collect(),
            step: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicates_and_shape_mismatch() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a.weight", Tensor::zeros(&[2, 2])).unwrap();
        assert!(s.insert("a.weight", Tensor::zeros(&[1])).is_err());
        assert!(s.accumulate("a.weight", &Tensor::zeros(&[4])).is_err());
        s.accumulate("a.weight", &Tensor::full(&[2, 2], 1.0)).unwrap();
        s.accumulate("a.weight", &Tensor::full(&[2, 2], 1.0)).unwrap();
        assert_eq!(s.param("a.weight").unwrap().grad.data(), &[2.0; 4]);
        s.zero_grad();
        assert_eq!(s.param("a.weight").unwrap().grad.data(), &[0.0; 4]);
    }

    #[test]
    fn iteration_order_is_lexicographic() {
        let mut s = ParamStore::<f32>::new();
        for n in ["z", "b", "m"] {
            s.insert(n, Tensor::zeros(&[1])).unwrap();
        }
        assert_eq!(s.names().collect::<Vec<_>>(), ["b", "m", "z"]);
    }
}
