//! Uniform traversal of parameter tensors, used for serialization,
//! initialization, checksums and gradient checks.

use crate::ops::{LinearParams, NormParams};
use crate::tensor::{Element, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    /// Trained by gradient descent.
    Learnable,
    /// Running statistics; saved with the weights, never differentiated.
    Buffer,
}

pub struct TensorRef<'a, T> {
    pub path: String,
    pub kind: TensorKind,
    pub tensor: &'a FeatureMap<T>,
}

pub struct TensorMut<'a, T> {
    pub path: String,
    pub kind: TensorKind,
    pub tensor: &'a mut FeatureMap<T>,
}

pub trait Parameterized<T: Element> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>);

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>);

    fn tensors(&self) -> Vec<TensorRef<'_, T>> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn learnable(&self) -> Vec<TensorRef<'_, T>> {
        let mut all = self.tensors();
        all.retain(|t| t.kind == TensorKind::Learnable);
        all
    }

    fn learnable_mut(&mut self) -> Vec<TensorMut<'_, T>> {
        let mut all = self.tensors_mut();
        all.retain(|t| t.kind == TensorKind::Learnable);
        all
    }

    /// Number of learnable scalars.
    fn param_count(&self) -> usize {
        self.learnable().iter().map(|t| t.tensor.numel()).sum()
    }

    /// Content hash over every tensor in traversal order.
    fn checksum(&self) -> u64 {
        self.tensors().iter().fold(0u64, |acc, t| {
            acc.rotate_left(7) ^ t.tensor.checksum()
        })
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Element> Parameterized<T> for LinearParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        out.push(TensorRef {
            path: join(prefix, "weight"),
            kind: TensorKind::Learnable,
            tensor: &self.weight,
        });
        out.push(TensorRef {
            path: join(prefix, "bias"),
            kind: TensorKind::Learnable,
            tensor: &self.bias,
        });
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        out.push(TensorMut {
            path: join(prefix, "weight"),
            kind: TensorKind::Learnable,
            tensor: &mut self.weight,
        });
        out.push(TensorMut {
            path: join(prefix, "bias"),
            kind: TensorKind::Learnable,
            tensor: &mut self.bias,
        });
    }
}

impl<T: Element> Parameterized<T> for NormParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        for (name, kind, tensor) in [
            ("gamma", TensorKind::Learnable, &self.gamma),
            ("beta", TensorKind::Learnable, &self.beta),
            ("running_mean", TensorKind::Buffer, &self.running_mean),
            ("running_var", TensorKind::Buffer, &self.running_var),
        ] {
            out.push(TensorRef {
                path: join(prefix, name),
                kind,
                tensor,
            });
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        for (name, kind, tensor) in [
            ("gamma", TensorKind::Learnable, &mut self.gamma),
            ("beta", TensorKind::Learnable, &mut self.beta),
            ("running_mean", TensorKind::Buffer, &mut self.running_mean),
            ("running_var", TensorKind::Buffer, &mut self.running_var),
        ] {
            out.push(TensorMut {
                path: join(prefix, name),
                kind,
                tensor,
            });
        }
    }
}
