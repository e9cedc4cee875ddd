//! Named parameter tensors and their binding onto a tape.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// An ordered set of named tensors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter {name}");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.names.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        if self.lookup.len() != self.names.len() {
            return self.names.iter().position(|n| n == name);
        }
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let i = self.index(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        let i = self.index(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        &mut self.values[i]
    }

    /// Total scalar count.
    pub fn size(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Concatenation of every tensor in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.size());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    /// Overwrites every tensor from a flat vector laid out like [`flatten`].
    ///
    /// [`flatten`]: ParamStore::flatten
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.size() {
            return Err(Error::shape(format!(
                "parameter vector has {} entries, store holds {}",
                flat.len(),
                self.size()
            )));
        }
        let mut at = 0;
        for v in &mut self.values {
            let n = v.len();
            v.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Rebuilds the name index after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self.names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
    }

    /// Records every tensor as a leaf on `tape`.
    pub fn bind<'s, 't>(&'s self, tape: &'t Tape) -> Bound<'s, 't> {
        Bound { store: self, vars: self.values.iter().map(|v| tape.leaf(v.clone())).collect() }
    }
}

/// A [`ParamStore`] recorded on a tape.
pub struct Bound<'s, 't> {
    store: &'s ParamStore,
    pub vars: Vec<Var<'t>>,
}

impl<'t> Bound<'_, 't> {
    pub fn var(&self, name: &str) -> Var<'t> {
        let i = self.store.index(name).unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.index(name).is_some()
    }

    /// Gradients of `output` for every bound tensor, as plain tensors.
    pub fn grads(&self, output: Var<'t>) -> Vec<Tensor> {
        output.tape().grad(output, &self.vars).iter().map(|g| (*g.value()).clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::row(vec![1.0, 2.0]));
        s.insert("b", Tensor::scalar(3.0));
        let flat = s.flatten();
        let mut t = s.clone();
        t.load_flat(&[0.0, 0.0, 0.0]).unwrap();
        t.load_flat(&flat).unwrap();
        assert_eq!(t, s);
        assert_eq!(s.get("b").item(), 3.0);
        assert!(t.load_flat(&[1.0]).is_err());
    }
}
