use std::collections::BTreeMap;

use mvsr_tensor::{Graph, Real, Tensor, Var};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named model weights in a fixed (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
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

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Same names with zero-filled tensors of the same shapes.
    pub fn zeros_like(&self) -> Self {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect() }
    }

    /// Checks that both stores hold the same names with the same shapes.
    pub fn check_same_layout(&self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() || !self.params.keys().eq(other.params.keys()) {
            let mine: Vec<&String> = self.params.keys().filter(|k| !other.params.contains_key(*k)).collect();
            let theirs: Vec<&String> = other.params.keys().filter(|k| !self.params.contains_key(*k)).collect();
            return Err(Error::StoreMismatch(format!("key sets differ: only left {mine:?}, only right {theirs:?}")));
        }
        for (k, v) in &self.params {
            let o = &other.params[k];
            if v.shape() != o.shape() {
                return Err(Error::StoreMismatch(format!("{k}: shape {:?} vs {:?}", v.shape(), o.shape())));
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .params
            .iter()
            .map(|(k, v)| v.max_abs_diff(&other.params[k]).as_f64())
            .fold(0.0, f64::max))
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut buf = Vec::new();
        for (k, v) in &self.params {
            h.update((k.len() as u64).to_le_bytes());
            h.update(k.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in v.data() {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }

    /// Places every tensor on the tape as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        BoundParams { vars: self.params.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), requires_grad))).collect() }
    }

    /// Tensors in name order, matching [`ParamStore::bind_vars`].
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.values().cloned().collect()
    }

    /// Pairs already-recorded tape variables with this store's names, in
    /// name order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundParams {
        assert_eq!(vars.len(), self.params.len(), "one variable per parameter");
        BoundParams { vars: self.params.keys().cloned().zip(vars.iter().copied()).collect() }
    }

    /// Collects the gradients of a bound store into a store of the same layout.
    pub fn gradients(&self, g: &Graph<T>, bound: &BoundParams) -> ParamStore<T> {
        ParamStore { params: self.params.keys().map(|k| (k.clone(), g.grad(bound.get(k)))).collect() }
    }
}

impl<T> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamStore { params: iter.into_iter().collect() }
    }
}

/// Tape handles of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("parameter {name:?} missing from store"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
