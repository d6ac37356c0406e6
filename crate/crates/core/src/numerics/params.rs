//! Named parameter collections and their attachment to a graph.
//!
//! Parameters live in a `BTreeMap` so every traversal — binding, gradient
//! collection, optimizer updates, checkpoint serialization — walks names in
//! the same order on every run. That ordering discipline is part of the
//! bit-for-bit reproducibility story.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::graph::{Graph, NodeId};
use crate::numerics::scalar::Scalar;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T: Scalar> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    /// Register a fresh parameter; re-registering a name is a wiring bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::InvalidArgument {
                op: "Params::insert",
                reason: format!("duplicate parameter name {name:?}"),
            });
        }
        self.map.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map.get(name).ok_or_else(|| Error::InvalidArgument {
            op: "Params::get",
            reason: format!("unknown parameter {name:?}"),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map.get_mut(name).ok_or_else(|| Error::InvalidArgument {
            op: "Params::get_mut",
            reason: format!("unknown parameter {name:?}"),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total element count across all tensors.
    pub fn num_elements(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
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

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// All parameters bound into a graph up front, name -> node. Bound leaves are
/// trainable; bound constants are frozen (used when a model is held fixed,
/// e.g. while optimizing an embedding against a frozen denoiser).
pub struct ParamBinder {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamBinder {
    pub fn bind<T: Scalar>(
        graph: &mut Graph<T>,
        params: &Params<T>,
        trainable: bool,
    ) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for (name, tensor) in params.iter() {
            let id = if trainable {
                graph.leaf(tensor)?
            } else {
                graph.constant(tensor)?
            };
            nodes.insert(name.clone(), id);
        }
        Ok(Self { nodes })
    }

    /// Wrap an existing name → node mapping. Lets callers that already own
    /// graph leaves (e.g. finite-difference harnesses perturbing raw tensors)
    /// drive model-building code that expects a binder.
    pub fn from_nodes(nodes: BTreeMap<String, NodeId>) -> Self {
        Self { nodes }
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument {
                op: "ParamBinder::node",
                reason: format!("parameter {name:?} was not bound"),
            })
    }

    /// Collect per-parameter gradients after `backward`. Parameters the loss
    /// never touched get explicit zero gradients, so the optimizer sees a
    /// complete, stable set of names.
    pub fn grads<T: Scalar>(&self, graph: &Graph<T>) -> BTreeMap<String, Tensor<T>> {
        self.nodes
            .iter()
            .map(|(name, &id)| {
                let shape = graph.shape(id).to_vec();
                let t = match graph.grad(id) {
                    Some(g) => Tensor::new(shape, g.to_vec()).expect("grad matches node shape"),
                    None => Tensor::zeros(shape),
                };
                (name.clone(), t)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut p = Params::<f32>::new();
        p.insert("w", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn untouched_params_get_zero_grads() {
        let mut p = Params::<f64>::new();
        p.insert("used", Tensor::from_vec(vec![2.0, 3.0])).unwrap();
        p.insert("unused", Tensor::from_vec(vec![5.0])).unwrap();
        let mut g = Graph::new();
        let b = ParamBinder::bind(&mut g, &p, true).unwrap();
        let used = b.node("used").unwrap();
        let sq = g.mul(used, used).unwrap();
        let loss = g.mean_all(sq);
        g.backward(loss).unwrap();
        let grads = b.grads(&g);
        assert_eq!(grads["used"].data(), &[2.0, 3.0]); // d mean(x²)/dx = x
        assert_eq!(grads["unused"].data(), &[0.0]);
    }

    #[test]
    fn frozen_binding_produces_constants() {
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::from_vec(vec![2.0])).unwrap();
        let mut g = Graph::new();
        let b = ParamBinder::bind(&mut g, &p, false).unwrap();
        let w = b.node("w").unwrap();
        let y = g.mul(w, w).unwrap();
        let loss = g.mean_all(y);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
    }
}
