//! Named, ordered collections of learnable tensors.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Params<T: Element = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

pub type ModelParams = Params<f32>;

impl<T: Element> Params<T> {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> Params<U> {
        Params {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        }
    }

    /// Copy entries of `other` whose names exist here, returning how many.
    pub fn load_matching(&mut self, other: &Params<T>) -> Result<usize> {
        let mut n = 0;
        for (name, value) in other.iter() {
            if let Some(dst) = self.entries.get_mut(name) {
                if dst.shape() != value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "load_matching",
                        lhs: dst.shape().to_vec(),
                        rhs: value.shape().to_vec(),
                    });
                }
                *dst = value.clone();
                n += 1;
            }
        }
        Ok(n)
    }
}

/// Parameter name to tape var, produced by [`Params::bind`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients accumulated on `tape` for every bound parameter.
    pub fn grads<T: Element>(&self, tape: &Tape<T>) -> Grads<T> {
        let mut g = Grads::default();
        for (name, &v) in &self.vars {
            if let Some(grad) = tape.grad(v) {
                g.add(name, grad);
            }
        }
        g
    }
}

impl<T: Element> FromIterator<(String, Tensor<T>)> for Params<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().collect(),
        }
    }
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Self {
            vars: iter.into_iter().collect(),
        }
    }
}

/// Per-parameter gradient buffers.
#[derive(Clone, Debug)]
pub struct Grads<T: Element = f32> {
    entries: IndexMap<String, Vec<T>>,
}

impl<T: Element> Default for Grads<T> {
    fn default() -> Self {
        Self {
            entries: IndexMap::new(),
        }
    }
}

impl<T: Element> Grads<T> {
    pub fn get(&self, name: &str) -> Option<&[T]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    /// Add `g` into the buffer for `name`, creating it if absent.
    pub fn add(&mut self, name: &str, g: &[T]) {
        match self.entries.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => {
                self.entries.insert(name.to_string(), g.to_vec());
            }
        }
    }

    pub fn merge(&mut self, other: &Grads<T>) {
        for (k, v) in &other.entries {
            self.add(k, v);
        }
    }

    pub fn scale(&mut self, c: T) {
        for v in self.entries.values_mut() {
            v.iter_mut().for_each(|x| *x = *x * c);
        }
    }

    pub fn zero(&mut self) {
        for v in self.entries.values_mut() {
            v.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[T])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|v| v.iter())
            .map(|x| x.as_f64().abs())
            .fold(0.0, f64::max)
    }
}
