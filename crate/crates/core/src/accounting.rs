//! Parameter and FLOP counts, by closed form and by traversing a model.
//!
//! One multiply-accumulate counts as one FLOP. Biases and norm scale/shift
//! count as parameters but add no FLOPs.

use std::collections::{BTreeMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::hire::HireModule;
use crate::network::{Model, ModelConfig};
use crate::ops::{ActivationKind, GatherMap, LinearParams, NormParams};
use crate::tensor::Element;

/// `((h + w) C^2 + C^2, 3 H W C^2)`: weight-matrix entries and MACs of a
/// hire module with two-layer `C/2` bottlenecks on divisible extents.
pub fn hire_module_closed_form(h: u64, w: u64, c: u64, height: u64, width: u64) -> (u64, u64) {
    ((h + w) * c * c + c * c, 3 * height * width * c * c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CostKind {
    Linear,
    Norm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub path: String,
    pub kind: CostKind,
    /// Learnable scalars, counted at first use only.
    pub params: u64,
    /// Weight-matrix entries (params minus bias), counted at first use only.
    pub weights: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops: u64,
    pub breakdown: Vec<CostEntry>,
}

impl CostReport {
    fn from_entries(breakdown: Vec<CostEntry>) -> Self {
        Self {
            params: breakdown.iter().map(|e| e.params).sum(),
            flops: breakdown.iter().map(|e| e.flops).sum(),
            breakdown,
        }
    }

    pub fn weights(&self) -> u64 {
        self.breakdown.iter().map(|e| e.weights).sum()
    }

    /// Entries whose path starts with `prefix` (a full path component match).
    pub fn filter(&self, prefix: &str) -> CostReport {
        let entries = self
            .breakdown
            .iter()
            .filter(|e| {
                e.path == prefix
                    || prefix.is_empty()
                    || (e.path.starts_with(prefix) && e.path[prefix.len()..].starts_with('.'))
            })
            .cloned()
            .collect();
        Self::from_entries(entries)
    }

    /// Entries whose path contains `component` as a path component.
    pub fn filter_component(&self, component: &str) -> CostReport {
        let entries = self
            .breakdown
            .iter()
            .filter(|e| e.path.split('.').any(|p| p == component))
            .cloned()
            .collect();
        Self::from_entries(entries)
    }

    /// Totals grouped by the first `depth` path components, in first-seen order.
    pub fn grouped(&self, depth: usize) -> Vec<(String, u64, u64)> {
        let mut order = Vec::new();
        let mut sums: BTreeMap<String, (u64, u64)> = BTreeMap::new();
        for e in &self.breakdown {
            let key = e.path.split('.').take(depth).collect::<Vec<_>>().join(".");
            let slot = sums.entry(key.clone()).or_insert_with(|| {
                order.push(key);
                (0, 0)
            });
            slot.0 += e.params;
            slot.1 += e.flops;
        }
        order
            .into_iter()
            .map(|k| {
                let (p, f) = sums[&k];
                (k, p, f)
            })
            .collect()
    }

    /// Plain-text table of the totals per top-level module.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<24} {:>14} {:>16}\n", "module", "params", "flops");
        for (k, p, f) in self.grouped(2) {
            s.push_str(&format!("{k:<24} {p:>14} {f:>16}\n"));
        }
        s.push_str(&format!("{:<24} {:>14} {:>16}\n", "total", self.params, self.flops));
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Shape-only backend: propagates shapes and records one entry per linear
/// and norm invocation.
#[derive(Debug, Default)]
pub struct CostCounter {
    scope: Vec<String>,
    seen: HashSet<usize>,
    entries: Vec<CostEntry>,
}

impl CostCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn finish(self) -> CostReport {
        CostReport::from_entries(self.entries)
    }

    fn path(&self) -> String {
        self.scope.join(".")
    }

    fn first_use<T>(&mut self, data: &[T]) -> bool {
        self.seen.insert(data.as_ptr() as usize)
    }
}

fn shape_err(op: &'static str, expected: Vec<usize>, got: &[usize]) -> Error {
    Error::Shape {
        op,
        expected,
        got: got.to_vec(),
    }
}

impl<T: Element> Graph<T> for CostCounter {
    type Var = Vec<usize>;

    fn shape<'a>(&'a self, v: &'a Vec<usize>) -> &'a [usize] {
        v
    }

    fn linear(&mut self, x: &Vec<usize>, p: &LinearParams<T>) -> Result<Vec<usize>> {
        let (din, dout) = (p.in_dim(), p.out_dim());
        if x.last() != Some(&din) {
            return Err(shape_err("linear", vec![din], x));
        }
        let rows: usize = x[..x.len() - 1].iter().product();
        let first = self.first_use(p.weight.data());
        let weights = if first { (din * dout) as u64 } else { 0 };
        self.entries.push(CostEntry {
            path: self.path(),
            kind: CostKind::Linear,
            params: if first { weights + dout as u64 } else { 0 },
            weights,
            flops: (rows * din * dout) as u64,
        });
        let mut out = x.clone();
        *out.last_mut().unwrap() = dout;
        Ok(out)
    }

    fn batch_norm(&mut self, x: &Vec<usize>, p: &NormParams<T>) -> Result<Vec<usize>> {
        let c = p.channels();
        if x.last() != Some(&c) {
            return Err(shape_err("batch_norm", vec![c], x));
        }
        let first = self.first_use(p.gamma.data());
        self.entries.push(CostEntry {
            path: self.path(),
            kind: CostKind::Norm,
            params: if first { 2 * c as u64 } else { 0 },
            weights: 0,
            flops: 0,
        });
        Ok(x.clone())
    }

    fn activation(&mut self, x: &Vec<usize>, _: ActivationKind) -> Result<Vec<usize>> {
        Ok(x.clone())
    }

    fn gather(&mut self, x: &Vec<usize>, map: GatherMap) -> Result<Vec<usize>> {
        if *x != map.in_shape {
            return Err(shape_err("gather", map.in_shape, x));
        }
        Ok(map.out_shape)
    }

    fn add(&mut self, a: &Vec<usize>, b: &Vec<usize>) -> Result<Vec<usize>> {
        if a != b {
            return Err(shape_err("add", a.clone(), b));
        }
        Ok(a.clone())
    }

    fn reshape(&mut self, x: &Vec<usize>, shape: Vec<usize>) -> Result<Vec<usize>> {
        if x.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(shape_err("reshape", shape, x));
        }
        Ok(shape)
    }

    fn mean_tokens(&mut self, x: &Vec<usize>) -> Result<Vec<usize>> {
        match x.as_slice() {
            [n, .., c] if x.len() >= 2 => Ok(vec![*n, *c]),
            _ => Err(shape_err("mean_tokens", vec![0, 0], x)),
        }
    }

    fn zeros(&mut self, shape: Vec<usize>) -> Vec<usize> {
        shape
    }

    fn push_scope(&mut self, name: &str) {
        self.scope.push(name.to_string());
    }

    fn pop_scope(&mut self) {
        self.scope.pop();
    }
}

/// Counts for one image of `height x width`.
pub fn count_model<T: Element>(model: &Model<T>, height: usize, width: usize) -> Result<CostReport> {
    let mut g = CostCounter::new();
    let input = vec![1, height, width, model.config().in_channels];
    model.logits(&mut g, &input)?;
    Ok(g.finish())
}

/// Traversal counts of a single hire module on a `1 x H x W x C` map.
pub fn count_hire_module<T: Element>(module: &HireModule<T>, height: usize, width: usize) -> Result<CostReport> {
    let mut g = CostCounter::new();
    module.forward(&mut g, &vec![1, height, width, module.channels()])?;
    Ok(g.finish())
}

/// Totals of the bottleneck-depth variants of `base`.
pub fn ablation_cost_sweep(
    base: &ModelConfig,
    fc_counts: &[usize],
    height: usize,
    width: usize,
) -> Result<Vec<(usize, CostReport)>> {
    fc_counts
        .iter()
        .map(|&k| {
            let mut cfg = base.clone();
            cfg.fc_layers = k;
            let model = Model::<f32>::zeroed(&cfg)?;
            Ok((k, count_model(&model, height, width)?))
        })
        .collect()
}

/// `|value - target| / target`.
pub fn relative_deviation(value: f64, target: f64) -> f64 {
    (value - target).abs() / target
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hire::{bottleneck_dims, BottleneckMlp, HireBranch};
    use crate::ops::NormMode;
    use crate::rearrange::{Axis, PaddingMode, RegionSpec};

    #[test]
    fn closed_form_examples() {
        assert_eq!(hire_module_closed_form(2, 2, 4, 8, 8), (80, 3072));
        assert_eq!(hire_module_closed_form(1, 1, 1, 1, 1), (3, 3));
        // branch matrices: 4C x C/2 twice, 2C x C/2 twice, C x C
        let c = 8;
        let per_matrix = 2 * (4 * c * c / 2) + 2 * (2 * c * c / 2) + c * c;
        assert_eq!(hire_module_closed_form(4, 2, c, 8, 8).0, per_matrix);
        assert_eq!(per_matrix, 448);
    }

    #[test]
    fn single_linear() {
        let p = LinearParams::<f32>::zeros(6, 6);
        let mut g = CostCounter::new();
        Graph::<f32>::push_scope(&mut g, "fc");
        Graph::<f32>::linear(&mut g, &vec![1, 5, 7, 6], &p).unwrap();
        Graph::<f32>::pop_scope(&mut g);
        let r = g.finish();
        assert_eq!(r.params, 36 + 6);
        assert_eq!(r.flops, 5 * 7 * 36);
        assert_eq!(r.breakdown[0].path, "fc");
    }

    #[test]
    fn shared_params_counted_once() {
        let p = LinearParams::<f32>::zeros(3, 3);
        let mut g = CostCounter::new();
        let x = vec![2, 3];
        let y = Graph::<f32>::linear(&mut g, &x, &p).unwrap();
        Graph::<f32>::linear(&mut g, &y, &p).unwrap();
        let r = g.finish();
        assert_eq!(r.params, 12);
        assert_eq!(r.flops, 2 * 2 * 9);
    }

    #[test]
    fn hire_module_traversal_matches_closed_form() {
        let (h, w, c) = (2, 4, 6);
        let branch = |axis, r| {
            let dims = bottleneck_dims(2, r, c).unwrap();
            let mlp = BottleneckMlp::<f32>::zeros(&dims, ActivationKind::Gelu, true, NormMode::BatchStatistics)
                .unwrap();
            HireBranch::new(RegionSpec::new(axis, r, PaddingMode::Circular).unwrap(), None, mlp)
        };
        let m = HireModule::new(branch(Axis::Height, h), branch(Axis::Width, w), LinearParams::zeros(c, c))
            .unwrap();
        let r = count_hire_module(&m, 8, 12).unwrap();
        let (params, flops) = hire_module_closed_form(h as u64, w as u64, c as u64, 8, 12);
        assert_eq!(r.weights(), params);
        assert_eq!(r.flops, flops);
    }

    #[test]
    fn breakdown_sums_to_totals() {
        let cfg = ModelConfig::builtin("tiny").unwrap();
        let model = Model::<f32>::zeroed(&cfg).unwrap();
        let r = count_model(&model, 224, 224).unwrap();
        let p: u64 = r.grouped(2).iter().map(|g| g.1).sum();
        let f: u64 = r.grouped(2).iter().map(|g| g.2).sum();
        assert_eq!((p, f), (r.params, r.flops));
        assert!(r.to_table().contains("stages.3"));
    }
}
