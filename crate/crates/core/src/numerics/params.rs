//! Named parameter sets and their graph bindings.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numerics::graph::{Gradients, Graph, NodeId};
use crate::numerics::tensor::Tensor;

/// An ordered collection of named parameter tensors. The order is the
/// canonical order for checkpoints, optimizer state and gradient vectors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, mut tensor: Tensor) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        tensor.set_requires_grad(true);
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    /// Insert every parameter into the graph as a leaf. With
    /// `trainable = false` the leaves are constants, so backward skips
    /// gradient work for them entirely.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    graph.leaf(t.clone())
                } else {
                    graph.constant(t.clone())
                }
            })
            .collect();
        BoundParams {
            ids,
            index: self.index.clone(),
        }
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors().map(Tensor::numel).sum()
    }
}

/// Node ids of one [`ParamSet`] bound into a particular graph.
pub struct BoundParams {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Node id for a parameter; panics on unknown names (programmer error).
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    /// Gradients in parameter order; unreachable parameters get zeros.
    pub fn collect_grads(&self, grads: &Gradients, params: &ParamSet) -> Vec<Tensor> {
        self.ids
            .iter()
            .zip(params.tensors())
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect()
    }
}

/// Gaussian-initialized tensor with the given standard deviation.
pub fn randn_tensor<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bind_preserves_order_and_lookup() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::zeros(vec![2, 2]));
        p.add("b", Tensor::zeros(vec![2]));
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        assert_eq!(g.value(bound.id("b")).shape(), &[2]);
        assert_eq!(g.value(bound.id("w")).shape(), &[2, 2]);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter")]
    fn duplicate_names_panic() {
        let mut p = ParamSet::new();
        p.add("w", Tensor::zeros(vec![1]));
        p.add("w", Tensor::zeros(vec![1]));
    }
}
