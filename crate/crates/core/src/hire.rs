//! The hire module: a height branch and a width branch that mix tokens
//! inside regions through a bottleneck MLP, plus a channel-only branch,
//! summed.
//!
//! One spatial branch runs
//!
//! ```text
//! cross_rearrange -> partition_pad -> inner_rearrange -> MLP
//!     -> inner_restore -> crop -> cross_restore
//! ```
//!
//! and returns a map of exactly the input shape for any extent. With the
//! shuffle manner the token transpose is taken on the padded extent, between
//! padding and the inner rearrangement.

use crate::error::{Error, Result};
use crate::graph::{scoped, Eager, Graph, Layer};
use crate::ops::{ActivationKind, LinearParams, NormMode, NormParams};
use crate::params::{join, Parameterized, TensorMut, TensorRef};
use crate::rearrange::{
    cross_rearrange_map, cross_restore_map, crop_map, inner_rearrange_map, inner_restore_map,
    partition_pad_map, Axis, PaddingMode, RegionSpec, ShiftManner, ShiftSpec,
};
use crate::tensor::{Element, FeatureMap};

/// Layer widths of a bottleneck MLP over `region * channels` features.
///
/// * 1 layer: `rC -> rC`
/// * 2 layers: `rC -> C/2 -> rC`
/// * k >= 3 layers: every hidden layer has width `d`, the largest integer
///   whose weight count `2 rC d + (k - 2) d^2` does not exceed the two-layer
///   bottleneck's `2 rC (C/2)`.
pub fn bottleneck_dims(fc_layers: usize, region: usize, channels: usize) -> Result<Vec<usize>> {
    let outer = region * channels;
    let half = channels / 2;
    if outer == 0 {
        return Err(Error::config("bottleneck needs a positive region size and channel count"));
    }
    match fc_layers {
        0 => Err(Error::config("bottleneck needs at least one FC layer")),
        1 => Ok(vec![outer, outer]),
        2 => {
            if half == 0 {
                return Err(Error::config(format!(
                    "bottleneck hidden width C/2 is zero for C = {channels}"
                )));
            }
            Ok(vec![outer, half, outer])
        }
        k => {
            let budget = 2 * outer * half;
            let extra = k - 2;
            let cost = |d: usize| 2 * outer * d + extra * d * d;
            let mut d = half;
            while d > 0 && cost(d) > budget {
                d -= 1;
            }
            while cost(d + 1) <= budget {
                d += 1;
            }
            if d == 0 {
                return Err(Error::config(format!(
                    "no positive hidden width fits a {k}-layer bottleneck for C = {channels}"
                )));
            }
            let mut dims = vec![outer];
            dims.extend(std::iter::repeat_n(d, k - 1));
            dims.push(outer);
            Ok(dims)
        }
    }
}

/// Stack of projections with normalization and activation after every
/// projection but the last.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckMlp<T = f32> {
    layers: Vec<LinearParams<T>>,
    norms: Vec<NormParams<T>>,
    activation: ActivationKind,
    use_norm: bool,
}

impl<T: Element> BottleneckMlp<T> {
    /// `norms` must hold one entry per hidden layer when `use_norm` is set,
    /// and be empty otherwise.
    pub fn new(
        layers: Vec<LinearParams<T>>,
        norms: Vec<NormParams<T>>,
        activation: ActivationKind,
        use_norm: bool,
    ) -> Result<Self> {
        let mut problems = Vec::new();
        if layers.is_empty() {
            problems.push("bottleneck MLP needs at least one layer".to_string());
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                problems.push(format!(
                    "layer {i} outputs {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    i + 1,
                    pair[1].in_dim()
                ));
            }
        }
        if let (Some(first), Some(last)) = (layers.first(), layers.last()) {
            if first.in_dim() != last.out_dim() {
                problems.push(format!(
                    "bottleneck must map {} features back to {}, got {}",
                    first.in_dim(),
                    first.in_dim(),
                    last.out_dim()
                ));
            }
        }
        let hidden = layers.len().saturating_sub(1);
        let expected_norms = if use_norm { hidden } else { 0 };
        if norms.len() != expected_norms {
            problems.push(format!("expected {expected_norms} norms, got {}", norms.len()));
        } else {
            for (i, n) in norms.iter().enumerate() {
                if n.channels() != layers[i].out_dim() {
                    problems.push(format!(
                        "norm {i} has {} channels, layer {i} outputs {}",
                        n.channels(),
                        layers[i].out_dim()
                    ));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::Config(problems));
        }
        Ok(Self {
            layers,
            norms,
            activation,
            use_norm,
        })
    }

    /// All-zero weights with identity norms, for widths from
    /// [`bottleneck_dims`].
    pub fn zeros(dims: &[usize], activation: ActivationKind, use_norm: bool, mode: NormMode) -> Result<Self> {
        let layers = dims.windows(2).map(|d| LinearParams::zeros(d[0], d[1])).collect();
        let norms = if use_norm {
            dims[1..dims.len() - 1]
                .iter()
                .map(|&c| NormParams::identity(c, mode))
                .collect()
        } else {
            Vec::new()
        };
        Self::new(layers, norms, activation, use_norm)
    }

    pub fn layers(&self) -> &[LinearParams<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearParams<T>] {
        &mut self.layers
    }

    pub fn norms_mut(&mut self) -> &mut [NormParams<T>] {
        &mut self.norms
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(|l| l.out_dim()));
        d
    }

    pub fn activation(&self) -> ActivationKind {
        self.activation
    }

    pub fn cast<U: Element>(&self) -> BottleneckMlp<U> {
        BottleneckMlp {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            norms: self.norms.iter().map(|n| n.cast()).collect(),
            activation: self.activation,
            use_norm: self.use_norm,
        }
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        self.norms.iter_mut().for_each(|n| n.mode = mode);
    }

    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let last = self.layers.len() - 1;
        let mut v = scoped(g, "fc.0", |g| g.linear(x, &self.layers[0]))?;
        for i in 0..last {
            if self.use_norm {
                v = scoped(g, &format!("norm.{i}"), |g| g.batch_norm(&v, &self.norms[i]))?;
            }
            v = g.activation(&v, self.activation)?;
            v = scoped(g, &format!("fc.{}", i + 1), |g| g.linear(&v, &self.layers[i + 1]))?;
        }
        Ok(v)
    }
}

/// Eager evaluation of a bottleneck MLP over the last axis.
pub fn bottleneck_mlp<T: Element>(v: &FeatureMap<T>, p: &BottleneckMlp<T>) -> Result<FeatureMap<T>> {
    p.forward(&mut Eager, v)
}

impl<T: Element> Parameterized<T> for BottleneckMlp<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("fc.{i}")), out);
        }
        for (i, n) in self.norms.iter().enumerate() {
            n.visit(&join(prefix, &format!("norm.{i}")), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("fc.{i}")), out);
        }
        for (i, n) in self.norms.iter_mut().enumerate() {
            n.visit_mut(&join(prefix, &format!("norm.{i}")), out);
        }
    }
}

/// One spatial branch of the hire module.
#[derive(Clone, Debug, PartialEq)]
pub struct HireBranch<T = f32> {
    pub region: RegionSpec,
    /// Cross-region rearrangement; `None` on blocks without it.
    pub shift: Option<ShiftSpec>,
    /// When false the branch mixes each token on its own (region size 1).
    pub inner: bool,
    /// When false the cross-region rearrangement is not undone.
    pub cross_restore: bool,
    pub mlp: BottleneckMlp<T>,
}

impl<T: Element> HireBranch<T> {
    pub fn new(region: RegionSpec, shift: Option<ShiftSpec>, mlp: BottleneckMlp<T>) -> Self {
        Self {
            region,
            shift,
            inner: true,
            cross_restore: true,
            mlp,
        }
    }

    pub fn axis(&self) -> Axis {
        self.region.axis
    }

    /// The partition actually applied (region size 1 when inner-region
    /// rearrangement is disabled).
    pub fn effective_region(&self) -> RegionSpec {
        if self.inner {
            self.region
        } else {
            RegionSpec {
                region_size: 1,
                ..self.region
            }
        }
    }

    pub fn cast<U: Element>(&self) -> HireBranch<U> {
        HireBranch {
            region: self.region,
            shift: self.shift,
            inner: self.inner,
            cross_restore: self.cross_restore,
            mlp: self.mlp.cast(),
        }
    }

    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let shape = g.shape(x).to_vec();
        let [_, _, _, c] = match shape[..] {
            [n, h, w, c] => [n, h, w, c],
            _ => {
                return Err(Error::invalid(format!(
                    "hire branch expects an (N, H, W, C) map, got {shape:?}"
                )))
            }
        };
        let mut region = self.effective_region();
        let extent = shape[region.axis.dim()];
        if extent == 1 && region.padding == PaddingMode::Reflect {
            // nothing to reflect about on a single-token axis
            region.padding = PaddingMode::Replicate;
        }
        let expected = region.region_size * c;
        if self.mlp.in_dim() != expected {
            return Err(Error::Shape {
                op: "hire_branch",
                expected: vec![region.region_size, c],
                got: vec![self.mlp.in_dim()],
            });
        }
        // A cyclic shift by the full extent is the identity, so the step is
        // taken modulo the extent; small late-stage maps stay valid.
        let shifted = self
            .shift
            .filter(|s| s.manner == ShiftManner::Shifted && s.step % extent != 0)
            .map(|s| ShiftSpec::shifted(s.step % extent));
        let shuffled = self.shift.filter(|s| s.manner == ShiftManner::Shuffle);

        let mut v: Option<G::Var> = None;
        macro_rules! cur {
            () => {
                v.as_ref().unwrap_or(x)
            };
        }
        if let Some(s) = &shifted {
            let map = cross_rearrange_map(g.shape(cur!()), &region, s)?;
            v = Some(g.gather(cur!(), map)?);
        }
        let (pad_map, record) = partition_pad_map(g.shape(cur!()), &region)?;
        if record.padded != record.original {
            v = Some(g.gather(cur!(), pad_map)?);
        }
        if let Some(s) = &shuffled {
            let map = cross_rearrange_map(g.shape(cur!()), &region, s)?;
            v = Some(g.gather(cur!(), map)?);
        }
        let map = inner_rearrange_map(g.shape(cur!()), region.axis, region.region_size)?;
        let rearranged = g.gather(cur!(), map)?;
        let mixed = self.mlp.forward(g, &rearranged)?;
        let map = inner_restore_map(g.shape(&mixed), region.axis, region.region_size)?;
        let mut out = g.gather(&mixed, map)?;
        if let Some(s) = &shuffled {
            if self.cross_restore {
                let map = cross_restore_map(g.shape(&out), &region, s)?;
                out = g.gather(&out, map)?;
            }
        }
        if record.padded != record.original {
            let map = crop_map(g.shape(&out), &record)?;
            out = g.gather(&out, map)?;
        }
        if let Some(s) = &shifted {
            if self.cross_restore {
                let map = cross_restore_map(g.shape(&out), &region, s)?;
                out = g.gather(&out, map)?;
            }
        }
        Ok(out)
    }
}

/// Eager evaluation of one spatial branch.
pub fn hire_branch<T: Element>(x: &FeatureMap<T>, cfg: &HireBranch<T>) -> Result<FeatureMap<T>> {
    cfg.forward(&mut Eager, x)
}

impl<T: Element> Parameterized<T> for HireBranch<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.mlp.visit(prefix, out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.mlp.visit_mut(prefix, out);
    }
}

/// Which of the three branches contribute to the sum.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchToggles {
    pub height: bool,
    pub width: bool,
    pub channel: bool,
}

impl Default for BranchToggles {
    fn default() -> Self {
        Self {
            height: true,
            width: true,
            channel: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HireModule<T = f32> {
    pub height: HireBranch<T>,
    pub width: HireBranch<T>,
    /// `C -> C`, no activation.
    pub channel: LinearParams<T>,
    pub toggles: BranchToggles,
}

impl<T: Element> HireModule<T> {
    pub fn new(height: HireBranch<T>, width: HireBranch<T>, channel: LinearParams<T>) -> Result<Self> {
        if height.axis() != Axis::Height || width.axis() != Axis::Width {
            return Err(Error::config("hire module needs one height and one width branch"));
        }
        if channel.in_dim() != channel.out_dim() {
            return Err(Error::config(format!(
                "channel branch must map C -> C, got {} -> {}",
                channel.in_dim(),
                channel.out_dim()
            )));
        }
        Ok(Self {
            height,
            width,
            channel,
            toggles: BranchToggles::default(),
        })
    }

    pub fn channels(&self) -> usize {
        self.channel.in_dim()
    }

    pub fn cast<U: Element>(&self) -> HireModule<U> {
        HireModule {
            height: self.height.cast(),
            width: self.width.cast(),
            channel: self.channel.cast(),
            toggles: self.toggles,
        }
    }

    pub fn set_norm_mode(&mut self, mode: NormMode) {
        self.height.mlp.set_norm_mode(mode);
        self.width.mlp.set_norm_mode(mode);
    }

    /// `X' = X'_W + X'_H + X'_C`, summed in that order; disabled branches
    /// contribute nothing.
    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        let c = *g.shape(x).last().unwrap_or(&0);
        if c != self.channels() {
            return Err(Error::Shape {
                op: "hire_module",
                expected: vec![self.channels()],
                got: g.shape(x).to_vec(),
            });
        }
        let mut parts = Vec::with_capacity(3);
        if self.toggles.width {
            parts.push(scoped(g, "width", |g| self.width.forward(g, x))?);
        }
        if self.toggles.height {
            parts.push(scoped(g, "height", |g| self.height.forward(g, x))?);
        }
        if self.toggles.channel {
            parts.push(scoped(g, "channel", |g| g.linear(x, &self.channel))?);
        }
        let mut parts = parts.into_iter();
        let Some(mut acc) = parts.next() else {
            let shape = g.shape(x).to_vec();
            return Ok(g.zeros(shape));
        };
        for p in parts {
            acc = g.add(&acc, &p)?;
        }
        Ok(acc)
    }
}

impl<T: Element> Layer<T> for HireModule<T> {
    fn forward_on<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        self.forward(g, x)
    }
}

impl<T: Element> Layer<T> for HireBranch<T> {
    fn forward_on<G: Graph<T>>(&self, g: &mut G, x: &G::Var) -> Result<G::Var> {
        self.forward(g, x)
    }
}

/// Eager evaluation of a hire module.
pub fn hire_module<T: Element>(x: &FeatureMap<T>, p: &HireModule<T>) -> Result<FeatureMap<T>> {
    p.forward(&mut Eager, x)
}

impl<T: Element> Parameterized<T> for HireModule<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a, T>>) {
        self.height.visit(&join(prefix, "height"), out);
        self.width.visit(&join(prefix, "width"), out);
        self.channel.visit(&join(prefix, "channel"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, T>>) {
        self.height.visit_mut(&join(prefix, "height"), out);
        self.width.visit_mut(&join(prefix, "width"), out);
        self.channel.visit_mut(&join(prefix, "channel"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::{init_params, random_map};

    fn branch(axis: Axis, h: usize, c: usize, shift: Option<ShiftSpec>, seed: u64) -> HireBranch<f64> {
        let dims = bottleneck_dims(2, h, c).unwrap();
        let mut mlp = BottleneckMlp::zeros(&dims, ActivationKind::Gelu, true, NormMode::BatchStatistics).unwrap();
        init_params(&mut mlp, seed);
        HireBranch::new(RegionSpec::new(axis, h, PaddingMode::Circular).unwrap(), shift, mlp)
    }

    #[test]
    fn iso_weight_hidden_width() {
        assert_eq!(bottleneck_dims(1, 4, 64).unwrap(), vec![256, 256]);
        assert_eq!(bottleneck_dims(2, 4, 64).unwrap(), vec![256, 32, 256]);
        // 512 d + d^2 <= 16384 -> d = 30
        assert_eq!(bottleneck_dims(3, 4, 64).unwrap(), vec![256, 30, 30, 256]);
        // 512 d + 2 d^2 <= 16384 -> d = 28
        assert_eq!(bottleneck_dims(4, 4, 64).unwrap(), vec![256, 28, 28, 28, 256]);
        assert!(bottleneck_dims(0, 4, 64).is_err());
        assert!(bottleneck_dims(2, 4, 1).is_err());
    }

    #[test]
    fn mlp_rejects_broken_chain() {
        let layers = vec![LinearParams::<f32>::zeros(8, 4), LinearParams::zeros(5, 8)];
        let norms = vec![NormParams::identity(4, NormMode::BatchStatistics)];
        assert!(matches!(
            BottleneckMlp::new(layers, norms, ActivationKind::Gelu, true),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identity_mlp_branch_is_identity() {
        let mlp = BottleneckMlp::new(vec![LinearParams::identity(3 * 5)], vec![], ActivationKind::Gelu, false)
            .unwrap();
        let x = random_map::<f64>(vec![2, 7, 7, 5], 1, 1.0);
        for shift in [None, Some(ShiftSpec::shifted(2)), Some(ShiftSpec::shuffle())] {
            for padding in PaddingMode::ALL {
                let region = RegionSpec::new(Axis::Height, 3, padding).unwrap();
                let b = HireBranch::new(region, shift, mlp.clone());
                assert_eq!(hire_branch(&x, &b).unwrap(), x, "{shift:?} {padding:?}");
            }
        }
    }

    #[test]
    fn non_divisible_extent_keeps_shape() {
        let b = branch(Axis::Height, 3, 6, Some(ShiftSpec::shifted(1)), 4);
        let x = random_map::<f64>(vec![1, 7, 7, 6], 2, 1.0);
        let y = hire_branch(&x, &b).unwrap();
        assert_eq!(y.shape(), &[1, 7, 7, 6]);
        assert!(y.all_finite());
    }

    #[test]
    fn zero_step_equals_no_cross_region_step() {
        let x = random_map::<f64>(vec![1, 8, 6, 4], 5, 1.0);
        let a = branch(Axis::Width, 2, 4, Some(ShiftSpec::shifted(0)), 7);
        let mut b = a.clone();
        b.shift = None;
        assert_eq!(hire_branch(&x, &a).unwrap(), hire_branch(&x, &b).unwrap());
    }

    #[test]
    fn omitted_restore_is_shifted_output() {
        let x = random_map::<f64>(vec![1, 8, 4, 4], 8, 1.0);
        let shift = ShiftSpec::shifted(3);
        let full = branch(Axis::Height, 2, 4, Some(shift), 9);
        let mut partial = full.clone();
        partial.cross_restore = false;
        let restored = hire_branch(&x, &full).unwrap();
        let expected = crate::rearrange::cross_rearrange(&restored, &full.region, &shift).unwrap();
        assert_eq!(hire_branch(&x, &partial).unwrap(), expected);
    }

    #[test]
    fn step_wraps_modulo_extent() {
        let x = random_map::<f64>(vec![1, 3, 3, 4], 3, 1.0);
        let a = branch(Axis::Height, 1, 4, Some(ShiftSpec::shifted(4)), 2);
        let mut b = a.clone();
        b.shift = Some(ShiftSpec::shifted(1));
        assert_eq!(hire_branch(&x, &a).unwrap(), hire_branch(&x, &b).unwrap());
    }

    fn module(c: usize) -> HireModule<f64> {
        let mut channel = LinearParams::zeros(c, c);
        init_params(&mut channel, 11);
        HireModule::new(
            branch(Axis::Height, 2, c, Some(ShiftSpec::shifted(1)), 12),
            branch(Axis::Width, 2, c, Some(ShiftSpec::shifted(1)), 13),
            channel,
        )
        .unwrap()
    }

    #[test]
    fn module_is_sum_of_branches() {
        let m = module(4);
        let x = random_map::<f64>(vec![2, 5, 6, 4], 14, 1.0);
        let y = hire_module(&x, &m).unwrap();
        let w = hire_branch(&x, &m.width).unwrap();
        let h = hire_branch(&x, &m.height).unwrap();
        let c = crate::ops::linear(&x, &m.channel).unwrap();
        let mut expected = w;
        for (i, v) in expected.data_mut().iter_mut().enumerate() {
            *v += h.data()[i];
            *v += c.data()[i];
        }
        assert_eq!(y, expected);
    }

    #[test]
    fn disabled_branches_give_zeros() {
        let mut m = module(4);
        m.toggles = BranchToggles {
            height: false,
            width: false,
            channel: false,
        };
        let x = random_map::<f64>(vec![1, 4, 4, 4], 15, 1.0);
        assert_eq!(hire_module(&x, &m).unwrap(), FeatureMap::zeros(vec![1, 4, 4, 4]));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let m = module(4);
        let x = FeatureMap::<f64>::zeros(vec![1, 4, 4, 3]);
        assert!(matches!(hire_module(&x, &m), Err(Error::Shape { .. })));
    }
}
