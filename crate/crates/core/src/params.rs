//! Named parameter tensors and their gradient buffers.

use std::collections::HashMap;

use crate::autodiff::{Gradients, Graph, Tensor};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named 2-D tensors. Names are unique and insertion order is the
/// serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.tensor(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::from_vec(t.rows, t.cols, t.data.iter().map(|v| U::of(v.to_f64())).collect()))
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect(),
            index: self.index.clone(),
        }
    }

    pub fn same_layout(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.rows == b.rows && a.cols == b.cols)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Add `scale * other` element-wise.
    pub fn add_scaled(&mut self, other: &ParamStore<T>, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * *y;
            }
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    /// Accumulate the gradients of every parameter node of `graph` into this
    /// buffer. Returns the parameters of the store that received no gradient
    /// (not used by the graph, or not reachable from the output).
    pub fn accumulate(&mut self, graph: &Graph<T>, grads: &Gradients<T>) -> Vec<ParamId> {
        let mut touched = vec![false; self.len()];
        for &(pid, node) in graph.param_nodes() {
            if let Some(g) = grads.get(node) {
                touched[pid.0] = true;
                for (a, b) in self.tensors[pid.0].data.iter_mut().zip(&g.data) {
                    *a += *b;
                }
            }
        }
        touched.iter().enumerate().filter(|(_, t)| !**t).map(|(i, _)| ParamId(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s: ParamStore<f32> = ParamStore::new();
        let a = s.add("a", Tensor::zeros(2, 3)).unwrap();
        let b = s.add("b", Tensor::zeros(1, 1)).unwrap();
        assert!(s.add("a", Tensor::zeros(1, 1)).is_err());
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.name(a), "a");
        assert_eq!(s.num_scalars(), 7);
        let names: Vec<&str> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["a", "b"]);
    }

    #[test]
    fn quadratic_gradient() {
        // f(w) = w * w at w = 3 has gradient 6.
        let mut s: ParamStore<f64> = ParamStore::new();
        let w = s.add("w", Tensor::scalar(3.0)).unwrap();
        let unused = s.add("unused", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new();
        let wn = g.param(&s, w);
        let y = g.matmul(wn, wn, 1);
        let grads = g.backward(y);
        let mut buf = s.zeros_like();
        let detached = buf.accumulate(&g, &grads);
        assert_eq!(buf.tensor(w).data, vec![6.0]);
        assert_eq!(detached, vec![unused]);
        assert_eq!(buf.tensor(unused).data, vec![0.0]);
    }

    #[test]
    fn cast_round_trip() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.add("x", Tensor::from_vec(1, 2, vec![0.25, -1.5])).unwrap();
        let d: ParamStore<f64> = s.cast();
        assert_eq!(d.cast::<f32>(), s);
    }
}
