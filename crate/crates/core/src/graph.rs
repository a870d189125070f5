//! Execution backends.
//!
//! Layers are written once against [`Graph`]. [`Eager`] evaluates
//! immediately and drops intermediates, [`crate::autodiff::Tape`] records the
//! graph for reverse-mode differentiation, and
//! [`crate::accounting::CostCounter`] only propagates shapes while tallying
//! parameters and multiply-accumulates.

use crate::error::Result;
use crate::ops::{self, ActivationKind, GatherMap, LinearParams, NormParams};
use crate::tensor::{Element, FeatureMap};

pub trait Graph<T: Element> {
    type Var;

    fn shape<'a>(&'a self, v: &'a Self::Var) -> &'a [usize];

    fn linear(&mut self, x: &Self::Var, p: &LinearParams<T>) -> Result<Self::Var>;

    fn batch_norm(&mut self, x: &Self::Var, p: &NormParams<T>) -> Result<Self::Var>;

    fn activation(&mut self, x: &Self::Var, kind: ActivationKind) -> Result<Self::Var>;

    fn gather(&mut self, x: &Self::Var, map: GatherMap) -> Result<Self::Var>;

    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var>;

    fn reshape(&mut self, x: &Self::Var, shape: Vec<usize>) -> Result<Self::Var>;

    fn mean_tokens(&mut self, x: &Self::Var) -> Result<Self::Var>;

    fn zeros(&mut self, shape: Vec<usize>) -> Self::Var;

    /// Names the layers recorded until the matching [`Graph::pop_scope`].
    fn push_scope(&mut self, _name: &str) {}

    fn pop_scope(&mut self) {}
}

/// Anything with a forward pass expressible on every backend.
pub trait Layer<T: Element> {
    fn forward_on<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var>;

    fn eval(&self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        self.forward_on(&mut Eager, x)
    }
}

/// Runs `f` inside a named scope.
pub fn scoped<T: Element, G: Graph<T>, R>(
    g: &mut G,
    name: &str,
    f: impl FnOnce(&mut G) -> Result<R>,
) -> Result<R> {
    g.push_scope(name);
    let out = f(g);
    g.pop_scope();
    out
}

/// Immediate evaluation; a variable is the value itself.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Element> Graph<T> for Eager {
    type Var = FeatureMap<T>;

    fn shape<'a>(&'a self, v: &'a FeatureMap<T>) -> &'a [usize] {
        v.shape()
    }

    fn linear(&mut self, x: &FeatureMap<T>, p: &LinearParams<T>) -> Result<FeatureMap<T>> {
        ops::linear(x, p)
    }

    fn batch_norm(&mut self, x: &FeatureMap<T>, p: &NormParams<T>) -> Result<FeatureMap<T>> {
        ops::batch_norm(x, p)
    }

    fn activation(&mut self, x: &FeatureMap<T>, kind: ActivationKind) -> Result<FeatureMap<T>> {
        Ok(ops::activation(x, kind))
    }

    fn gather(&mut self, x: &FeatureMap<T>, map: GatherMap) -> Result<FeatureMap<T>> {
        ops::gather(x, &map)
    }

    fn add(&mut self, a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        ops::add(a, b)
    }

    fn reshape(&mut self, x: &FeatureMap<T>, shape: Vec<usize>) -> Result<FeatureMap<T>> {
        x.clone().reshape(shape)
    }

    fn mean_tokens(&mut self, x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        ops::mean_tokens(x)
    }

    fn zeros(&mut self, shape: Vec<usize>) -> FeatureMap<T> {
        FeatureMap::zeros(shape)
    }
}
