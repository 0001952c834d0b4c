use std::collections::BTreeMap;

use super::{Real, Tensor, Var};
use crate::error::{Error, Result};

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T = f64> {
    map: BTreeMap<String, Tensor<T>>,
}

/// Graph handles for a [`ParamSet`], keyed by the same names.
pub type ParamVars = BTreeMap<String, Var>;

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Option<Tensor<T>> {
        self.map.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, t)| (k.clone(), t.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_aligned(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.map.len() != other.map.len() {
            return Err(Error::shape(op, format!("{} vs {} tensors", self.map.len(), other.map.len())));
        }
        for ((ka, ta), (kb, tb)) in self.map.iter().zip(other.map.iter()) {
            if ka != kb || ta.shape() != tb.shape() {
                return Err(Error::shape(
                    op,
                    format!("{ka}{:?} vs {kb}{:?}", ta.shape(), tb.shape()),
                ));
            }
        }
        Ok(())
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            map: iter.into_iter().collect(),
        }
    }
}
