//! Central finite differences, the independent route for checking
//! [`crate::autodiff::Tape::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, Layer};
use crate::init::random_map;
use crate::ops::LinearParams;
use crate::params::Parameterized;
use crate::tensor::FeatureMap;

/// Step used by every gradient check.
pub const FD_EPS: f64 = 1e-5;

/// Maximum relative error accepted between the two gradient routes.
pub const GRAD_REL_TOL: f64 = 1e-4;

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-8;

/// `|a - b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    relative_error_floored(a, b, REL_FLOOR)
}

pub fn relative_error_floored(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Denominator floor matched to the rounding noise of a central difference
/// of a loss whose summands have total magnitude `scale`: partials below it
/// are compared on an absolute scale of `GRAD_REL_TOL * floor`, roughly the
/// difference quotient's resolution.
pub fn fd_floor(scale: f64) -> f64 {
    REL_FLOOR.max(f64::EPSILON * scale / FD_EPS / GRAD_REL_TOL)
}

/// `(f(+eps) - f(-eps)) / (2 eps)` where `eval(delta)` evaluates the function
/// with one coordinate displaced by `delta` (and must leave it restored).
pub fn central_difference(eps: f64, mut eval: impl FnMut(f64) -> f64) -> f64 {
    let plus = eval(eps);
    let minus = eval(-eps);
    (plus - minus) / (2.0 * eps)
}

/// Central-difference estimate of the gradient of `f` at `x`, one coordinate
/// at a time.
pub fn finite_difference_grad(
    f: impl FnMut(&FeatureMap<f64>) -> f64,
    x: &FeatureMap<f64>,
    eps: f64,
) -> Result<FeatureMap<f64>> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    let values = finite_difference_at(f, x, &coords, eps)?;
    FeatureMap::new(x.shape().to_vec(), values)
}

/// Central-difference partials of `f` at `x` for the listed flat coordinates.
pub fn finite_difference_at(
    mut f: impl FnMut(&FeatureMap<f64>) -> f64,
    x: &FeatureMap<f64>,
    coords: &[usize],
    eps: f64,
) -> Result<Vec<f64>> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    Ok(coords
        .iter()
        .map(|&i| {
            let base = probe.data()[i];
            central_difference(eps, |delta| {
                probe.data_mut()[i] = base + delta;
                let v = f(&probe);
                probe.data_mut()[i] = base;
                v
            })
        })
        .collect())
}

/// Summary of a comparison between analytic and numeric partials.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Denominator floor used by [`GradCheckReport::record`].
    pub floor: f64,
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn new() -> Self {
        Self::with_floor(REL_FLOOR)
    }

    pub fn with_floor(floor: f64) -> Self {
        Self {
            checked: 0,
            floor,
            max_rel_error: 0.0,
            worst: None,
        }
    }

    pub fn record(&mut self, label: impl Into<String>, analytic: f64, numeric: f64) {
        let err = relative_error_floored(analytic, numeric, self.floor);
        let err = if err.is_nan() { f64::INFINITY } else { err };
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = Some(GradMismatch {
                label: label.into(),
                analytic,
                numeric,
            });
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < GRAD_REL_TOL
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self::new()
    }
}

/// `sum(y . probe)` over the last axis: a scalar loss with non-degenerate
/// gradients even behind batch-statistics normalization.
fn probed_loss<G: Graph<f64>>(g: &mut G, y: &G::Var, probe: &LinearParams<f64>) -> Result<G::Var> {
    g.linear(y, probe)
}

fn eager_loss<L: Layer<f64>>(layer: &L, x: &FeatureMap<f64>, probe: &LinearParams<f64>) -> Result<f64> {
    let y = layer.eval(x)?;
    Ok(probed_loss(&mut Eager, &y, probe)?.sum())
}

/// `sum |y . p|`, the magnitude that sets the loss's rounding error.
fn loss_scale(y: &FeatureMap<f64>, probe: &LinearParams<f64>) -> f64 {
    let k = probe.weight.numel();
    y.data()
        .chunks(k)
        .map(|row| row.iter().zip(probe.weight.data()).map(|(a, b)| (a * b).abs()).sum::<f64>())
        .sum()
}

/// Compares tape gradients of a probed loss with central differences on
/// `samples` coordinates drawn uniformly from the input and every learnable
/// tensor of `layer`.
pub fn check_layer_gradients<L: Layer<f64> + Parameterized<f64>>(
    layer: &mut L,
    x: &FeatureMap<f64>,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let y0 = layer.eval(x)?;
    let probe = LinearParams::new(random_map(vec![y0.last_dim(), 1], seed ^ 0x9e37, 1.0), FeatureMap::zeros(vec![1]))?;
    let floor = fd_floor(loss_scale(&y0, &probe));

    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let y = layer.forward_on(&mut tape, &xid)?;
    let l = probed_loss(&mut tape, &y, &probe)?;
    let loss = tape.sum(l);
    let grads = tape.backward(loss)?;

    let mut sizes = vec![("input".to_string(), x.numel())];
    sizes.extend(layer.learnable().iter().map(|t| (t.path.clone(), t.tensor.numel())));
    let total: usize = sizes.iter().map(|s| s.1).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, total, samples.min(total)).into_vec();
    picks.sort_unstable();

    let dx = grads.wrt(xid);
    let param_grads: Vec<FeatureMap<f64>> = layer.learnable().iter().map(|t| grads.param(t.tensor)).collect();
    drop(grads);

    let mut report = GradCheckReport::with_floor(floor);
    let mut probe_x = x.clone();
    for flat in picks {
        let (mut slot, mut off) = (0, flat);
        while off >= sizes[slot].1 {
            off -= sizes[slot].1;
            slot += 1;
        }
        let label = format!("{}[{off}]", sizes[slot].0);
        let (analytic, numeric) = if slot == 0 {
            let base = probe_x.data()[off];
            let numeric = central_difference(FD_EPS, |d| {
                probe_x.data_mut()[off] = base + d;
                let v = eager_loss(layer, &probe_x, &probe);
                probe_x.data_mut()[off] = base;
                v.unwrap_or(f64::NAN)
            });
            (dx.data()[off], numeric)
        } else {
            let numeric = central_difference(FD_EPS, |d| {
                let set = |layer: &mut L, v: Option<f64>| {
                    let mut ts = layer.learnable_mut();
                    let cell = &mut ts[slot - 1].tensor.data_mut()[off];
                    let old = *cell;
                    *cell = v.unwrap_or(old + d);
                    old
                };
                let base = set(layer, None);
                let v = eager_loss(layer, x, &probe);
                set(layer, Some(base));
                v.unwrap_or(f64::NAN)
            });
            (param_grads[slot - 1].data()[off], numeric)
        };
        report.record(label, analytic, numeric);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = FeatureMap::from_fn(vec![2, 3], |i| i as f64 * 0.3 - 1.0);
        let g = finite_difference_grad(|m| m.sum(), &x, FD_EPS).unwrap();
        assert!(g.data().iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn quadratic() {
        let x = FeatureMap::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_difference_grad(|m| m.data().iter().map(|v| v * v).sum(), &x, FD_EPS)
            .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = FeatureMap::<f64>::zeros(vec![1]);
        assert!(finite_difference_grad(|m| m.sum(), &x, 0.0).is_err());
    }

    #[test]
    fn probe_is_restored() {
        let x = FeatureMap::from_fn(vec![3], |i| i as f64);
        let mut seen = Vec::new();
        finite_difference_at(|m| { seen.push(m.clone()); m.sum() }, &x, &[0, 1, 2], 0.5).unwrap();
        // each evaluation differs from x in exactly one coordinate
        for m in seen {
            let diffs = m.data().iter().zip(x.data()).filter(|(a, b)| a != b).count();
            assert_eq!(diffs, 1);
        }
    }
}
