//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every op of one forward pass as a node holding its
//! value, its inputs and whatever the adjoint needs. Nodes are appended in
//! evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Parameters enter the tape through the layer ops (`linear`, `batch_norm`)
//! and are keyed by the address of their storage, so a parameter used twice
//! is one leaf and its gradient can be looked up from the model afterwards
//! with [`Gradients::param`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::ops::{self, ActivationKind, GatherMap, LinearParams, NormCache, NormParams};
use crate::tensor::{Element, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear,
    BatchNorm(NormCache<T>),
    /// Running-statistics normalization; recorded but not differentiable.
    Opaque(String),
    Activation(ActivationKind),
    Gather(GatherMap),
    Add,
    Reshape,
    MeanTokens,
    Sum,
}

#[derive(Debug)]
struct Node<T> {
    value: FeatureMap<T>,
    op: Op<T>,
    inputs: Vec<NodeId>,
}

/// Recorded operation graph of a single forward pass. Single-threaded; use
/// one tape per pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, NodeId>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: FeatureMap<T>, op: Op<T>, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { value, op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an input leaf.
    pub fn leaf(&mut self, value: FeatureMap<T>) -> NodeId {
        self.push(value, Op::Leaf, Vec::new())
    }

    /// Registers (or looks up) the leaf for a parameter tensor.
    pub fn param(&mut self, p: &FeatureMap<T>) -> NodeId {
        let key = p.data().as_ptr() as usize;
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.leaf(p.clone());
        self.params.insert(key, id);
        id
    }

    pub fn value(&self, id: NodeId) -> &FeatureMap<T> {
        &self.nodes[id.0].value
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(FeatureMap::scalar(s), Op::Sum, vec![x])
    }

    /// Records an op without an adjoint; backward through it fails.
    pub fn opaque(&mut self, name: &str, value: FeatureMap<T>, inputs: &[NodeId]) -> NodeId {
        self.push(value, Op::Opaque(name.to_string()), inputs.to_vec())
    }

    /// Gradients of the scalar node `output` with respect to every node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>> {
        if self.value(output).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<FeatureMap<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(FeatureMap::full(self.value(output).shape().to_vec(), T::one()));

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let input_grads: Vec<FeatureMap<T>> = match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                    continue;
                }
                Op::Opaque(name) => return Err(Error::UnsupportedOp(name.clone())),
                Op::Linear => {
                    let x = self.value(node.inputs[0]);
                    let w = self.value(node.inputs[1]);
                    let (dx, dw, db) = ops::linear_backward(x, w, &dy);
                    vec![dx, dw, db]
                }
                Op::BatchNorm(cache) => {
                    let gamma = self.value(node.inputs[1]);
                    let (dx, dg, db) = ops::batch_norm_backward(cache, gamma, &dy);
                    vec![dx, dg, db]
                }
                Op::Activation(kind) => {
                    vec![ops::activation_backward(self.value(node.inputs[0]), *kind, &dy)]
                }
                Op::Gather(map) => vec![ops::gather_backward(map, &dy)],
                Op::Add => vec![dy.clone(), dy],
                Op::Reshape => {
                    let shape = self.value(node.inputs[0]).shape().to_vec();
                    vec![dy.reshape(shape)?]
                }
                Op::MeanTokens => {
                    let shape = self.value(node.inputs[0]).shape();
                    vec![ops::mean_tokens_backward(shape, &dy)]
                }
                Op::Sum => {
                    let g = dy.data()[0];
                    vec![FeatureMap::full(
                        self.value(node.inputs[0]).shape().to_vec(),
                        g,
                    )]
                }
            };
            for (input, g) in node.inputs.iter().zip(input_grads) {
                accumulate(&mut grads[input.0], g);
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.clone(),
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<FeatureMap<T>>, g: FeatureMap<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a = *a + *b;
            }
        }
        None => *slot = Some(g),
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<FeatureMap<T>>>,
    shapes: Vec<Vec<usize>>,
    params: HashMap<usize, NodeId>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for a leaf node; zeros when the leaf does not reach the
    /// output. Intermediate gradients are released during the sweep.
    pub fn wrt(&self, id: NodeId) -> FeatureMap<T> {
        self.grads[id.0]
            .clone()
            .unwrap_or_else(|| FeatureMap::zeros(self.shapes[id.0].clone()))
    }

    /// Gradient for a parameter tensor, looked up by storage address. A
    /// parameter the forward pass never touched gets zeros.
    pub fn param(&self, p: &FeatureMap<T>) -> FeatureMap<T> {
        match self.params.get(&(p.data().as_ptr() as usize)) {
            Some(&id) => self.wrt(id),
            None => FeatureMap::zeros(p.shape().to_vec()),
        }
    }
}

impl<T: Element> Graph<T> for Tape<T> {
    type Var = NodeId;

    fn shape<'a>(&'a self, v: &'a NodeId) -> &'a [usize] {
        self.value(*v).shape()
    }

    fn linear(&mut self, x: &NodeId, p: &LinearParams<T>) -> Result<NodeId> {
        let value = ops::linear(self.value(*x), p)?;
        let w = self.param(&p.weight);
        let b = self.param(&p.bias);
        Ok(self.push(value, Op::Linear, vec![*x, w, b]))
    }

    fn batch_norm(&mut self, x: &NodeId, p: &NormParams<T>) -> Result<NodeId> {
        let (value, cache) = ops::batch_norm_cached(self.value(*x), p)?;
        let g = self.param(&p.gamma);
        let b = self.param(&p.beta);
        Ok(match cache {
            Some(cache) => self.push(value, Op::BatchNorm(cache), vec![*x, g, b]),
            None => self.opaque("batch_norm[running-statistics]", value, &[*x, g, b]),
        })
    }

    fn activation(&mut self, x: &NodeId, kind: ActivationKind) -> Result<NodeId> {
        let value = ops::activation(self.value(*x), kind);
        Ok(self.push(value, Op::Activation(kind), vec![*x]))
    }

    fn gather(&mut self, x: &NodeId, map: GatherMap) -> Result<NodeId> {
        let value = ops::gather(self.value(*x), &map)?;
        Ok(self.push(value, Op::Gather(map), vec![*x]))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let value = ops::add(self.value(*a), self.value(*b))?;
        Ok(self.push(value, Op::Add, vec![*a, *b]))
    }

    fn reshape(&mut self, x: &NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(*x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape, vec![*x]))
    }

    fn mean_tokens(&mut self, x: &NodeId) -> Result<NodeId> {
        let value = ops::mean_tokens(self.value(*x))?;
        Ok(self.push(value, Op::MeanTokens, vec![*x]))
    }

    fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        self.leaf(FeatureMap::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::NormMode;

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::from_fn(vec![2, 3], |i| i as f64 - 2.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(x).data().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn bias_gradient_of_summed_linear_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::from_fn(vec![4, 3], |i| (i as f64).sin()));
        let p = LinearParams::new(
            FeatureMap::from_fn(vec![3, 2], |i| i as f64 * 0.1),
            FeatureMap::zeros(vec![2]),
        )
        .unwrap();
        let y = tape.linear(&x, &p).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        // four rows each contribute 1 to each bias entry
        assert_eq!(g.param(&p.bias).data(), &[4.0, 4.0]);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::full(vec![1, 2], 1.0));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        let unused = LinearParams::<f64>::identity(2);
        assert_eq!(g.param(&unused.weight), FeatureMap::zeros(vec![2, 2]));
    }

    #[test]
    fn running_statistics_norm_has_no_adjoint() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::full(vec![1, 1, 1, 2], 1.0));
        let p = NormParams::identity(2, NormMode::RunningStatistics);
        let y = tape.batch_norm(&x, &p).unwrap();
        let s = tape.sum(y);
        assert!(matches!(tape.backward(s), Err(Error::UnsupportedOp(_))));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(FeatureMap::full(vec![2], 1.0));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_parameter_is_one_leaf() {
        let mut tape = Tape::<f64>::new();
        let p = LinearParams::<f64>::identity(2);
        let x = tape.leaf(FeatureMap::full(vec![1, 2], 1.0));
        let a = tape.linear(&x, &p).unwrap();
        let b = tape.linear(&a, &p).unwrap();
        let s = tape.sum(b);
        let g = tape.backward(s).unwrap();
        // d/db of sum(W(Wx + b) + b) with W = I is 2 per entry
        assert_eq!(g.param(&p.bias).data(), &[2.0, 2.0]);
    }
}
