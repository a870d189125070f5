//! Forward kernels and their adjoints.
//!
//! Every kernel takes its inputs by shared reference and returns a freshly
//! allocated result. The adjoints are used by [`crate::autodiff::Tape`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, FeatureMap};

/// Batch-norm epsilon.
pub const NORM_EPS: f64 = 1e-5;

/// Fully connected layer, `out = x @ weight + bias` over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<T = f32> {
    /// `[in_dim, out_dim]`
    pub weight: FeatureMap<T>,
    /// `[out_dim]`
    pub bias: FeatureMap<T>,
}

impl<T: Element> LinearParams<T> {
    pub fn new(weight: FeatureMap<T>, bias: FeatureMap<T>) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([_, out], [b]) if out == b => Ok(Self { weight, bias }),
            _ => Err(Error::Shape {
                op: "linear params",
                expected: weight.shape().to_vec(),
                got: bias.shape().to_vec(),
            }),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: FeatureMap::zeros(vec![in_dim, out_dim]),
            bias: FeatureMap::zeros(vec![out_dim]),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut p = Self::zeros(dim, dim);
        for i in 0..dim {
            p.weight.set(&[i, i], T::one());
        }
        p
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<U: Element>(&self) -> LinearParams<U> {
        LinearParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// Normalize with statistics of the current batch (over N·H·W).
    BatchStatistics,
    /// Normalize with the stored running mean and variance.
    RunningStatistics,
}

/// Per-channel batch normalization over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct NormParams<T = f32> {
    pub gamma: FeatureMap<T>,
    pub beta: FeatureMap<T>,
    pub running_mean: FeatureMap<T>,
    pub running_var: FeatureMap<T>,
    pub eps: f64,
    pub mode: NormMode,
}

impl<T: Element> NormParams<T> {
    /// Unit scale, zero shift, running statistics (0, 1).
    pub fn identity(channels: usize, mode: NormMode) -> Self {
        Self {
            gamma: FeatureMap::full(vec![channels], T::one()),
            beta: FeatureMap::zeros(vec![channels]),
            running_mean: FeatureMap::zeros(vec![channels]),
            running_var: FeatureMap::full(vec![channels], T::one()),
            eps: NORM_EPS,
            mode,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, m) in [
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if m.shape() != [c] {
                return Err(Error::Shape {
                    op: name,
                    expected: vec![c],
                    got: m.shape().to_vec(),
                });
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::invalid("batch_norm epsilon must be positive"));
        }
        if self.running_var.data().iter().any(|v| *v < T::zero()) {
            return Err(Error::invalid("running variance must be non-negative"));
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> NormParams<U> {
        NormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: self.eps,
            mode: self.mode,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    #[default]
    Gelu,
    Relu,
}

impl ActivationKind {
    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Gelu => "gelu",
            ActivationKind::Relu => "relu",
        }
    }
}

fn rows_of<T: Element>(x: &FeatureMap<T>) -> (usize, usize) {
    let d = x.last_dim();
    (x.numel().checked_div(d).unwrap_or(0), d)
}

fn out_shape_with_last(x: &FeatureMap<impl Element>, last: usize) -> Vec<usize> {
    let mut s = x.shape().to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

pub fn linear<T: Element>(x: &FeatureMap<T>, p: &LinearParams<T>) -> Result<FeatureMap<T>> {
    let mut out = linear_nobias(x, &p.weight)?;
    let bias = p.bias.data();
    for row in out.data_mut().chunks_exact_mut(bias.len().max(1)) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o = *o + *b;
        }
    }
    Ok(out)
}

/// `x @ weight` with no bias term.
pub fn linear_nobias<T: Element>(x: &FeatureMap<T>, weight: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    let [in_dim, out_dim] = match weight.shape() {
        &[i, o] => [i, o],
        s => {
            return Err(Error::invalid(format!(
                "linear weight must be rank 2, got {s:?}"
            )))
        }
    };
    if x.rank() == 0 || x.last_dim() != in_dim {
        return Err(Error::Shape {
            op: "linear",
            expected: vec![in_dim, out_dim],
            got: x.shape().to_vec(),
        });
    }
    let (rows, _) = rows_of(x);
    let mut out = FeatureMap::zeros(out_shape_with_last(x, out_dim));
    T::gemm(
        rows,
        in_dim,
        out_dim,
        T::one(),
        x.data(),
        in_dim as isize,
        1,
        weight.data(),
        out_dim as isize,
        1,
        T::zero(),
        out.data_mut(),
        out_dim as isize,
        1,
    );
    Ok(out)
}

/// Gradients of `linear` given the upstream gradient `dy`: `(dx, dweight, dbias)`.
pub fn linear_backward<T: Element>(
    x: &FeatureMap<T>,
    weight: &FeatureMap<T>,
    dy: &FeatureMap<T>,
) -> (FeatureMap<T>, FeatureMap<T>, FeatureMap<T>) {
    let (in_dim, out_dim) = (weight.shape()[0], weight.shape()[1]);
    let (rows, _) = rows_of(x);
    let mut dx = FeatureMap::zeros(x.shape().to_vec());
    // dx = dy @ W^T
    T::gemm(
        rows,
        out_dim,
        in_dim,
        T::one(),
        dy.data(),
        out_dim as isize,
        1,
        weight.data(),
        1,
        out_dim as isize,
        T::zero(),
        dx.data_mut(),
        in_dim as isize,
        1,
    );
    // dW = x^T @ dy
    let mut dw = FeatureMap::zeros(vec![in_dim, out_dim]);
    T::gemm(
        in_dim,
        rows,
        out_dim,
        T::one(),
        x.data(),
        1,
        in_dim as isize,
        dy.data(),
        out_dim as isize,
        1,
        T::zero(),
        dw.data_mut(),
        out_dim as isize,
        1,
    );
    let mut db = FeatureMap::zeros(vec![out_dim]);
    for row in dy.data().chunks_exact(out_dim.max(1)) {
        for (d, g) in db.data_mut().iter_mut().zip(row) {
            *d = *d + *g;
        }
    }
    (dx, dw, db)
}

/// Values saved by a batch-statistics forward pass for the adjoint.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub normalized: FeatureMap<T>,
    pub inv_std: Vec<T>,
}

pub fn batch_norm<T: Element>(x: &FeatureMap<T>, p: &NormParams<T>) -> Result<FeatureMap<T>> {
    batch_norm_cached(x, p).map(|(y, _)| y)
}

pub(crate) fn batch_norm_cached<T: Element>(
    x: &FeatureMap<T>,
    p: &NormParams<T>,
) -> Result<(FeatureMap<T>, Option<NormCache<T>>)> {
    let c = p.channels();
    if x.rank() == 0 || x.last_dim() != c {
        return Err(Error::Shape {
            op: "batch_norm",
            expected: vec![c],
            got: x.shape().to_vec(),
        });
    }
    let (rows, _) = rows_of(x);
    let eps = T::of(p.eps);
    let (mean, var) = match p.mode {
        NormMode::BatchStatistics => {
            if rows == 0 {
                return Err(Error::invalid(
                    "batch_norm in batch-statistics mode needs at least one token",
                ));
            }
            let n = T::of(rows as f64);
            let mut mean = vec![T::zero(); c];
            for row in x.data().chunks_exact(c) {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m = *m + *v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / n);
            let mut var = vec![T::zero(); c];
            for row in x.data().chunks_exact(c) {
                for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = *v - *m;
                    *s = *s + d * d;
                }
            }
            var.iter_mut().for_each(|s| *s = *s / n);
            (mean, var)
        }
        NormMode::RunningStatistics => (
            p.running_mean.data().to_vec(),
            p.running_var.data().to_vec(),
        ),
    };
    let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
    let mut normalized = FeatureMap::zeros(x.shape().to_vec());
    for (out, row) in normalized
        .data_mut()
        .chunks_exact_mut(c)
        .zip(x.data().chunks_exact(c))
    {
        for i in 0..c {
            out[i] = (row[i] - mean[i]) * inv_std[i];
        }
    }
    let mut y = normalized.clone();
    let (g, b) = (p.gamma.data(), p.beta.data());
    for row in y.data_mut().chunks_exact_mut(c) {
        for i in 0..c {
            row[i] = row[i] * g[i] + b[i];
        }
    }
    let cache = match p.mode {
        NormMode::BatchStatistics => Some(NormCache {
            normalized,
            inv_std,
        }),
        NormMode::RunningStatistics => None,
    };
    Ok((y, cache))
}

/// Adjoint of batch-statistics normalization: `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Element>(
    cache: &NormCache<T>,
    gamma: &FeatureMap<T>,
    dy: &FeatureMap<T>,
) -> (FeatureMap<T>, FeatureMap<T>, FeatureMap<T>) {
    let c = gamma.numel();
    let xhat = &cache.normalized;
    let rows = xhat.numel() / c;
    let n = T::of(rows as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (g_row, x_row) in dy.data().chunks_exact(c).zip(xhat.data().chunks_exact(c)) {
        for i in 0..c {
            dbeta[i] = dbeta[i] + g_row[i];
            dgamma[i] = dgamma[i] + g_row[i] * x_row[i];
        }
    }
    let mut dx = FeatureMap::zeros(xhat.shape().to_vec());
    let g = gamma.data();
    for ((out, g_row), x_row) in dx
        .data_mut()
        .chunks_exact_mut(c)
        .zip(dy.data().chunks_exact(c))
        .zip(xhat.data().chunks_exact(c))
    {
        for i in 0..c {
            let scale = g[i] * cache.inv_std[i] / n;
            out[i] = scale * (n * g_row[i] - dbeta[i] - x_row[i] * dgamma[i]);
        }
    }
    (
        dx,
        FeatureMap::new(vec![c], dgamma).expect("channel vector"),
        FeatureMap::new(vec![c], dbeta).expect("channel vector"),
    )
}

fn gelu_scalar<T: Element>(v: T) -> T {
    let half = T::of(0.5);
    half * v * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad_scalar<T: Element>(v: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (v * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(v * v) * half).exp() * T::of(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + v * pdf
}

pub fn activation<T: Element>(x: &FeatureMap<T>, kind: ActivationKind) -> FeatureMap<T> {
    match kind {
        ActivationKind::Gelu => x.map(gelu_scalar),
        ActivationKind::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
    }
}

pub fn activation_backward<T: Element>(
    x: &FeatureMap<T>,
    kind: ActivationKind,
    dy: &FeatureMap<T>,
) -> FeatureMap<T> {
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().iter_mut().zip(x.data()) {
        let local = match kind {
            ActivationKind::Gelu => gelu_grad_scalar(*v),
            ActivationKind::Relu => {
                if *v > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        };
        *d = *d * local;
    }
    dx
}

pub fn add<T: Element>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "add",
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    FeatureMap::new(a.shape().to_vec(), data)
}

/// Global average over every axis between the batch axis and the channel
/// axis: `[N, ..., C] -> [N, C]`.
pub fn mean_tokens<T: Element>(x: &FeatureMap<T>) -> Result<FeatureMap<T>> {
    if x.rank() < 2 {
        return Err(Error::invalid(format!(
            "mean_tokens needs rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    let c = x.last_dim();
    let tokens = x.numel().checked_div(n * c).unwrap_or(0);
    if tokens == 0 {
        return Err(Error::invalid("mean_tokens over zero tokens"));
    }
    let scale = T::of(1.0 / tokens as f64);
    let mut out = FeatureMap::zeros(vec![n, c]);
    for (b, chunk) in x.data().chunks_exact(tokens * c).enumerate() {
        let dst = &mut out.data_mut()[b * c..(b + 1) * c];
        for row in chunk.chunks_exact(c) {
            for (d, v) in dst.iter_mut().zip(row) {
                *d = *d + *v;
            }
        }
        dst.iter_mut().for_each(|d| *d = *d * scale);
    }
    Ok(out)
}

pub fn mean_tokens_backward<T: Element>(in_shape: &[usize], dy: &FeatureMap<T>) -> FeatureMap<T> {
    let n = in_shape[0];
    let c = *in_shape.last().expect("rank >= 2");
    let numel: usize = in_shape.iter().product();
    let tokens = numel / (n * c);
    let scale = T::of(1.0 / tokens as f64);
    let mut dx = FeatureMap::zeros(in_shape.to_vec());
    for (b, chunk) in dx.data_mut().chunks_exact_mut(tokens * c).enumerate() {
        let src = &dy.data()[b * c..(b + 1) * c];
        for row in chunk.chunks_exact_mut(c) {
            for (d, g) in row.iter_mut().zip(src) {
                *d = *g * scale;
            }
        }
    }
    dx
}

/// A copy that moves contiguous blocks of elements.
///
/// Output block `i` (elements `i*block .. (i+1)*block` of the output) is a
/// copy of input block `src[i]`, or zeros when `src[i]` is [`GatherMap::ZERO`].
/// Every rearrangement, padding, crop and patch unfold in the crate is a
/// gather; its adjoint is the matching scatter-add.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GatherMap {
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub block: usize,
    pub src: Vec<usize>,
}

impl GatherMap {
    pub const ZERO: usize = usize::MAX;

    pub fn new(
        in_shape: Vec<usize>,
        out_shape: Vec<usize>,
        block: usize,
        src: Vec<usize>,
    ) -> Result<Self> {
        let in_numel: usize = in_shape.iter().product();
        let out_numel: usize = out_shape.iter().product();
        let valid = block > 0
            && in_numel.is_multiple_of(block)
            && out_numel == src.len() * block
            && src
                .iter()
                .all(|&s| s == Self::ZERO || s < in_numel / block);
        if !valid {
            return Err(Error::invalid(format!(
                "inconsistent gather map {in_shape:?} -> {out_shape:?} (block {block})"
            )));
        }
        Ok(Self {
            in_shape,
            out_shape,
            block,
            src,
        })
    }

    /// True when no input block is read twice and none is dropped.
    pub fn is_permutation(&self) -> bool {
        let in_blocks = self.in_shape.iter().product::<usize>() / self.block;
        if in_blocks != self.src.len() {
            return false;
        }
        let mut seen = vec![false; in_blocks];
        for &s in &self.src {
            if s == Self::ZERO || std::mem::replace(&mut seen[s], true) {
                return false;
            }
        }
        true
    }
}

pub fn gather<T: Element>(x: &FeatureMap<T>, map: &GatherMap) -> Result<FeatureMap<T>> {
    if x.shape() != map.in_shape.as_slice() {
        return Err(Error::Shape {
            op: "gather",
            expected: map.in_shape.clone(),
            got: x.shape().to_vec(),
        });
    }
    let b = map.block;
    let mut out = Vec::with_capacity(map.src.len() * b);
    let src = x.data();
    for &s in &map.src {
        if s == GatherMap::ZERO {
            out.extend(std::iter::repeat_n(T::zero(), b));
        } else {
            out.extend_from_slice(&src[s * b..(s + 1) * b]);
        }
    }
    FeatureMap::new(map.out_shape.clone(), out)
}

pub fn gather_backward<T: Element>(map: &GatherMap, dy: &FeatureMap<T>) -> FeatureMap<T> {
    let b = map.block;
    let mut dx = FeatureMap::zeros(map.in_shape.clone());
    let dst = dx.data_mut();
    for (i, &s) in map.src.iter().enumerate() {
        if s == GatherMap::ZERO {
            continue;
        }
        for (d, g) in dst[s * b..(s + 1) * b]
            .iter_mut()
            .zip(&dy.data()[i * b..(i + 1) * b])
        {
            *d = *d + *g;
        }
    }
    dx
}
