//! Randomized property suites, grouped by scope. Each property runs once
//! per seed and reports pass/fail with the first counterexample.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::accounting::{count_hire_module, count_model, hire_module_closed_form};
use crate::error::{Error, Result};
use crate::hire::{bottleneck_dims, hire_branch, hire_module, BottleneckMlp, HireBranch, HireModule};
use crate::init::{init_params, random_map};
use crate::network::{forward, forward_features, hire_block, Block, Model, ModelConfig};
use crate::ops::{linear, ActivationKind, LinearParams, NormMode};
use crate::params::Parameterized;
use crate::rearrange::{
    cross_rearrange, cross_restore, crop, inner_rearrange, inner_restore, partition_pad,
    preserves_cyclic_order, token_permutation, Axis, PaddingMode, RegionSpec, ShiftSpec,
};
use crate::tensor::FeatureMap;

pub const SCOPES: [&str; 4] = ["rearrange", "hire", "network", "accounting"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropertyResult {
    pub scope: &'static str,
    pub name: &'static str,
    pub cases: usize,
    pub passed: bool,
    /// First failing case, if any.
    pub detail: Option<String>,
}

type Check = fn(&mut ChaCha8Rng) -> Result<std::result::Result<(), String>>;

fn run(scope: &'static str, props: &[(&'static str, Check)], seeds: usize, seed: u64) -> Vec<PropertyResult> {
    props
        .iter()
        .enumerate()
        .map(|(i, &(name, check))| {
            let mut detail = None;
            for k in 0..seeds {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((i as u64) << 32) ^ k as u64);
                match check(&mut rng) {
                    Ok(Ok(())) => {}
                    Ok(Err(msg)) => detail = Some(format!("case {k}: {msg}")),
                    Err(e) => detail = Some(format!("case {k}: error: {e}")),
                }
                if detail.is_some() {
                    break;
                }
            }
            PropertyResult {
                scope,
                name,
                cases: seeds,
                passed: detail.is_none(),
                detail,
            }
        })
        .collect()
}

/// Runs one scope, or every scope for `"all"`.
pub fn run_scope(scope: &str, seeds: usize, seed: u64) -> Result<Vec<PropertyResult>> {
    let suites: [(&'static str, &[(&'static str, Check)]); 4] = [
        ("rearrange", REARRANGE),
        ("hire", HIRE),
        ("network", NETWORK),
        ("accounting", ACCOUNTING),
    ];
    let mut out = Vec::new();
    let mut matched = false;
    for (name, props) in suites {
        if scope == "all" || scope == name {
            matched = true;
            out.extend(run(name, props, seeds, seed));
        }
    }
    if !matched {
        return Err(Error::invalid(format!(
            "unknown scope `{scope}` (expected all, {})",
            SCOPES.join(", ")
        )));
    }
    Ok(out)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn random_padding(rng: &mut impl Rng) -> PaddingMode {
    PaddingMode::ALL[rng.random_range(0..4)]
}

pub fn random_axis(rng: &mut impl Rng) -> Axis {
    if rng.random_bool(0.5) {
        Axis::Height
    } else {
        Axis::Width
    }
}

fn random_input(rng: &mut impl Rng, max: usize) -> FeatureMap<f64> {
    let shape = vec![
        rng.random_range(1..3),
        rng.random_range(1..=max),
        rng.random_range(1..=max),
        rng.random_range(1..5),
    ];
    random_map(shape, rng.random(), 1.0)
}

const REARRANGE: &[(&str, Check)] = &[
    ("inner restore inverts inner rearrange", |rng| {
        let region = rng.random_range(1..5);
        let axis = random_axis(rng);
        let mut shape = vec![rng.random_range(1..3), rng.random_range(1..7), rng.random_range(1..7), rng.random_range(1..4)];
        shape[axis.dim()] = region * rng.random_range(1..4);
        let x = random_map::<f64>(shape, rng.random(), 1.0);
        let spec = RegionSpec::new(axis, region, PaddingMode::Circular)?;
        let y = inner_rearrange(&x, &spec)?;
        Ok(ensure(inner_restore(&y, &spec)? == x, || format!("{:?} h={region}", x.shape()))
            .and(ensure(y.multiset_checksum() == x.multiset_checksum(), || "multiset changed".into())))
    }),
    ("cross restore inverts cross rearrange", |rng| {
        let region = rng.random_range(1..5);
        let axis = random_axis(rng);
        let mut x = random_input(rng, 9);
        if rng.random_bool(0.5) {
            let mut shape = x.shape().to_vec();
            shape[axis.dim()] = region * rng.random_range(1..4);
            x = random_map(shape, rng.random(), 1.0);
        }
        let extent = x.shape()[axis.dim()];
        let spec = RegionSpec::new(axis, region, PaddingMode::Circular)?;
        let shift = if extent % region == 0 && rng.random_bool(0.5) {
            ShiftSpec::shuffle()
        } else {
            ShiftSpec::shifted(rng.random_range(0..extent))
        };
        let y = cross_rearrange(&x, &spec, &shift)?;
        Ok(ensure(cross_restore(&y, &spec, &shift)? == x, || format!("{:?} {shift:?}", x.shape()))
            .and(ensure(y.multiset_checksum() == x.multiset_checksum(), || "multiset changed".into())))
    }),
    ("crop inverts partition pad", |rng| {
        let x = random_input(rng, 9);
        let axis = random_axis(rng);
        let mut padding = random_padding(rng);
        if x.shape()[axis.dim()] == 1 && padding == PaddingMode::Reflect {
            padding = PaddingMode::Zero;
        }
        let spec = RegionSpec::new(axis, rng.random_range(1..5), padding)?;
        let (p, rec) = partition_pad(&x, &spec)?;
        Ok(ensure(p.shape()[axis.dim()] % spec.region_size == 0, || "padded extent not divisible".into())
            .and(ensure(crop(&p, &rec)? == x, || format!("{:?} {spec:?}", x.shape()))))
    }),
    ("shifts compose additively modulo extent", |rng| {
        let extent = rng.random_range(1..20);
        let (a, b) = (rng.random_range(0..extent), rng.random_range(0..extent));
        let pa = token_permutation(extent, &ShiftSpec::shifted(a), 1)?;
        let pb = token_permutation(extent, &ShiftSpec::shifted(b), 1)?;
        let pab = token_permutation(extent, &ShiftSpec::shifted((a + b) % extent), 1)?;
        let composed: Vec<usize> = pa.iter().map(|&i| pb[i]).collect();
        Ok(ensure(composed == pab, || format!("E={extent} a={a} b={b}")))
    }),
    ("shifted keeps cyclic order, shuffle breaks it", |rng| {
        let region = rng.random_range(2..6);
        let groups = rng.random_range(2..6);
        let extent = region * groups;
        let shifted = token_permutation(extent, &ShiftSpec::shifted(rng.random_range(0..extent)), region)?;
        let shuffle = token_permutation(extent, &ShiftSpec::shuffle(), region)?;
        Ok(ensure(preserves_cyclic_order(&shifted), || format!("shifted E={extent}"))
            .and(ensure(!preserves_cyclic_order(&shuffle), || format!("shuffle E={extent} h={region}"))))
    }),
];

fn random_branch(rng: &mut ChaCha8Rng, axis: Axis, c: usize, shift: Option<ShiftSpec>) -> Result<HireBranch<f64>> {
    let region = rng.random_range(1..4);
    let dims = bottleneck_dims(2, region, c)?;
    let mut mlp = BottleneckMlp::zeros(&dims, ActivationKind::Gelu, true, NormMode::BatchStatistics)?;
    init_params(&mut mlp, rng.random());
    let padding = match random_padding(rng) {
        PaddingMode::Reflect => PaddingMode::Replicate,
        p => p,
    };
    Ok(HireBranch::new(RegionSpec::new(axis, region, padding)?, shift, mlp))
}

fn random_module(rng: &mut ChaCha8Rng, c: usize, step: usize) -> Result<HireModule<f64>> {
    let shift = Some(ShiftSpec::shifted(step));
    let mut channel = LinearParams::zeros(c, c);
    init_params(&mut channel, rng.random());
    let h = random_branch(rng, Axis::Height, c, shift)?;
    let w = random_branch(rng, Axis::Width, c, shift)?;
    HireModule::new(h, w, channel)
}

const HIRE: &[(&str, Check)] = &[
    ("module preserves shape", |rng| {
        let primes = [2, 3, 5, 7, 11, 13];
        let c = 2 * rng.random_range(1..4);
        let shape = vec![1, primes[rng.random_range(0..6)], rng.random_range(1..12), c];
        let m = random_module(rng, c, 0)?;
        let x = random_map::<f64>(shape.clone(), rng.random(), 1.0);
        let y = hire_module(&x, &m)?;
        Ok(ensure(y.shape() == shape.as_slice() && y.all_finite(), || format!("{shape:?}")))
    }),
    ("zero step equals disabled cross-region step", |rng| {
        let c = 2 * rng.random_range(1..4);
        let x = random_map::<f64>(vec![1, rng.random_range(1..10), rng.random_range(1..10), c], rng.random(), 1.0);
        let a = random_module(rng, c, 0)?;
        let mut b = a.clone();
        b.height.shift = None;
        b.width.shift = None;
        Ok(ensure(hire_module(&x, &a)? == hire_module(&x, &b)?, || format!("{:?}", x.shape())))
    }),
    ("omitted restore leaves the shift applied", |rng| {
        let c = 2 * rng.random_range(1..4);
        let x = random_map::<f64>(vec![1, rng.random_range(2..10), rng.random_range(2..10), c], rng.random(), 1.0);
        let axis = random_axis(rng);
        let step = rng.random_range(1..x.shape()[axis.dim()]);
        let full = random_branch(rng, axis, c, Some(ShiftSpec::shifted(step)))?;
        let mut partial = full.clone();
        partial.cross_restore = false;
        let expected = cross_rearrange(&hire_branch(&x, &full)?, &full.region, &ShiftSpec::shifted(step))?;
        Ok(ensure(hire_branch(&x, &partial)? == expected, || format!("{:?} s={step}", x.shape())))
    }),
    ("module is the sum of its branches", |rng| {
        let c = 2 * rng.random_range(1..4);
        let x = random_map::<f64>(vec![1, rng.random_range(1..9), rng.random_range(1..9), c], rng.random(), 1.0);
        let m = random_module(rng, c, 1)?;
        let y = hire_module(&x, &m)?;
        let w = hire_branch(&x, &m.width)?;
        let h = hire_branch(&x, &m.height)?;
        let ch = linear(&x, &m.channel)?;
        let worst = (0..y.numel())
            .map(|i| (y.data()[i] - (w.data()[i] + h.data()[i] + ch.data()[i])).abs())
            .fold(0.0, f64::max);
        Ok(ensure(worst < 1e-6, || format!("deviation {worst:e}")))
    }),
];

fn micro_model(rng: &mut ChaCha8Rng) -> Result<Model<f64>> {
    Model::<f64>::build(&ModelConfig::micro(3), rng.random())
}

const NETWORK: &[(&str, Check)] = &[
    ("stage resolutions are ceil divisions", |rng| {
        let model = micro_model(rng)?;
        let (h, w) = (rng.random_range(32..80), rng.random_range(32..80));
        let x = random_map::<f64>(vec![1, h, w, 3], rng.random(), 1.0);
        let feats = forward_features(&x, &model)?;
        let got: Vec<(usize, usize)> = feats.iter().map(|f| (f.shape()[1], f.shape()[2])).collect();
        let want: Vec<(usize, usize)> = [4, 8, 16, 32].iter().map(|&d| (h.div_ceil(d), w.div_ceil(d))).collect();
        Ok(ensure(got == want, || format!("{h}x{w}: {got:?}")))
    }),
    ("zeroed mixing weights make blocks residual", |rng| {
        let cfg = ModelConfig::micro(3);
        let stage = rng.random_range(0..4);
        let mut block = Block::<f64>::zeroed(&cfg, stage, rng.random_range(0..2))?;
        for t in block.norm1.tensors_mut().into_iter().chain(block.norm2.tensors_mut()) {
            if t.path == "beta" || t.path == "running_mean" {
                let v = rng.random_range(-1.0..1.0);
                t.tensor.data_mut().fill(v);
            }
        }
        let c = cfg.stages[stage].channels;
        let x = random_map::<f64>(vec![1, rng.random_range(1..9), rng.random_range(1..9), c], rng.random(), 1.0);
        Ok(ensure(hire_block(&x, &block)? == x, || format!("stage {stage}")))
    }),
    ("identical batch rows give identical logits", |rng| {
        let model = micro_model(rng)?;
        let one = random_map::<f64>(vec![1, 40, 36, 3], rng.random(), 1.0);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let two = FeatureMap::new(vec![2, 40, 36, 3], data)?;
        let y = forward(&two, &model)?;
        let k = y.shape()[1];
        Ok(ensure(y.data()[..k] == y.data()[k..], || "rows differ".into()))
    }),
    ("equal seeds give equal parameters", |rng| {
        let seed = rng.random();
        let a = Model::<f32>::build(&ModelConfig::micro(3), seed)?;
        let b = Model::<f32>::build(&ModelConfig::micro(3), seed)?;
        Ok(ensure(a.checksum() == b.checksum() && a == b, || format!("seed {seed}")))
    }),
];

const ACCOUNTING: &[(&str, Check)] = &[
    ("traversal matches closed form", |rng| {
        let (h, w) = (rng.random_range(1..5), rng.random_range(1..5));
        let c = 2 * rng.random_range(1..17);
        let (hh, ww) = (h * rng.random_range(1..6), w * rng.random_range(1..6));
        let m = closed_form_module(h, w, c)?;
        let r = count_hire_module(&m, hh, ww)?;
        let (p, f) = hire_module_closed_form(h as u64, w as u64, c as u64, hh as u64, ww as u64);
        Ok(ensure(r.weights() == p && r.flops == f, || {
            format!("h={h} w={w} C={c} {hh}x{ww}: ({}, {}) vs ({p}, {f})", r.weights(), r.flops)
        }))
    }),
    ("params do not depend on resolution", |rng| {
        let model = Model::<f32>::zeroed(&ModelConfig::micro(rng.random_range(1..20)))?;
        let a = count_model(&model, rng.random_range(32..300), rng.random_range(32..300))?;
        let b = count_model(&model, rng.random_range(32..300), rng.random_range(32..300))?;
        Ok(ensure(a.params == b.params, || format!("{} vs {}", a.params, b.params)))
    }),
    ("doubling height doubles mixing flops", |rng| {
        let model = Model::<f32>::zeroed(&ModelConfig::micro(3))?;
        // extents divisible by 32 * 12 keep every stage's regions unpadded
        let (h, w) = (384 * rng.random_range(1..3), 384);
        let mixing = |h| -> Result<u64> {
            let r = count_model(&model, h, w)?;
            Ok(r.filter_component("hire").flops + r.filter_component("mlp").flops)
        };
        let (a, b) = (mixing(h)?, mixing(2 * h)?);
        Ok(ensure(b == 2 * a, || format!("{a} -> {b}")))
    }),
];

/// A hire module with two-layer `C/2` bottlenecks and no cross-region step,
/// the configuration the closed form describes.
pub fn closed_form_module(h: usize, w: usize, c: usize) -> Result<HireModule<f32>> {
    let branch = |axis, r| -> Result<HireBranch<f32>> {
        let mlp = BottleneckMlp::zeros(&bottleneck_dims(2, r, c)?, ActivationKind::Gelu, true, NormMode::RunningStatistics)?;
        Ok(HireBranch::new(RegionSpec::new(axis, r, PaddingMode::Circular)?, None, mlp))
    };
    HireModule::new(branch(Axis::Height, h)?, branch(Axis::Width, w)?, LinearParams::zeros(c, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_scope_passes() {
        let results = run_scope("all", 3, 1).unwrap();
        for r in &results {
            assert!(r.passed, "{} / {}: {:?}", r.scope, r.name, r.detail);
        }
        assert_eq!(results.iter().map(|r| r.scope).collect::<std::collections::BTreeSet<_>>().len(), 4);
    }

    #[test]
    fn unknown_scope_is_rejected() {
        assert!(run_scope("gradients", 1, 0).is_err());
    }
}
