//! Tape adjoints against central finite differences, one op at a time.

use hiremlp::autodiff::{NodeId, Tape};
use hiremlp::gradcheck::{finite_difference_grad, relative_error, FD_EPS, GRAD_REL_TOL};
use hiremlp::graph::{Eager, Graph};
use hiremlp::init::random_map;
use hiremlp::ops::{ActivationKind, GatherMap, LinearParams, NormMode, NormParams};
use hiremlp::FeatureMap;
use proptest::prelude::*;

/// Probed scalar `sum(y * p)` so every output element matters.
fn probe_for(shape: &[usize], seed: u64) -> FeatureMap<f64> {
    random_map(shape.to_vec(), seed, 1.0)
}

fn dot(a: &FeatureMap<f64>, b: &FeatureMap<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Checks d/dx of `sum(op(x) * p)` for a unary op written against `Graph`.
fn check_unary<F>(x: &FeatureMap<f64>, seed: u64, op: F) -> Result<(), TestCaseError>
where
    F: Fn(&mut Tape<f64>, NodeId) -> NodeId,
{
    let mut tape = Tape::new();
    let id = tape.leaf(x.clone());
    let out = op(&mut tape, id);
    let y = tape.value(out).clone();
    let p = probe_for(y.shape(), seed);
    // weighted sum through a [k, 1] projection of the flattened output
    let flat = tape.reshape(&out, vec![1, y.numel()]).unwrap();
    let proj = LinearParams::new(p.clone().reshape(vec![y.numel(), 1]).unwrap(), FeatureMap::zeros(vec![1])).unwrap();
    let l = tape.linear(&flat, &proj).unwrap();
    let loss = tape.sum(l);
    let analytic = tape.backward(loss).unwrap().wrt(id);
    let numeric = finite_difference_grad(
        |v| {
            let mut t = Tape::new();
            let i = t.leaf(v.clone());
            let o = op(&mut t, i);
            dot(t.value(o), &p)
        },
        x,
        FD_EPS,
    )
    .unwrap();
    for (a, n) in analytic.data().iter().zip(numeric.data()) {
        prop_assert!(relative_error(*a, *n) < GRAD_REL_TOL, "analytic {a} numeric {n}");
    }
    Ok(())
}

fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    (1usize..3, 1usize..5, 1usize..5, 1usize..5).prop_map(|(n, h, w, c)| vec![n, h, w, c])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_input_and_weight(shape in small_shape(), out in 1usize..6, seed in any::<u64>()) {
        let x = random_map::<f64>(shape.clone(), seed, 1.0);
        let c = shape[3];
        let p = LinearParams::new(random_map(vec![c, out], seed ^ 1, 1.0), random_map(vec![out], seed ^ 2, 1.0)).unwrap();
        check_unary(&x, seed ^ 3, |t, i| t.linear(&i, &p).unwrap())?;

        // weight gradient
        let probe = probe_for(&[shape[..3].iter().product::<usize>() * out], seed ^ 4);
        let loss_of = |w: &FeatureMap<f64>| {
            let q = LinearParams::new(w.clone(), p.bias.clone()).unwrap();
            let y = Eager.linear(&x, &q).unwrap();
            dot(&y, &probe)
        };
        let mut tape = Tape::new();
        let xi = tape.leaf(x.clone());
        let y = tape.linear(&xi, &p).unwrap();
        let flat = tape.reshape(&y, vec![1, probe.numel()]).unwrap();
        let proj = LinearParams::new(probe.clone().reshape(vec![probe.numel(), 1]).unwrap(), FeatureMap::zeros(vec![1])).unwrap();
        let l = tape.linear(&flat, &proj).unwrap();
        let loss = tape.sum(l);
        let gw = tape.backward(loss).unwrap().param(&p.weight);
        let nw = finite_difference_grad(loss_of, &p.weight, FD_EPS).unwrap();
        for (a, n) in gw.data().iter().zip(nw.data()) {
            prop_assert!(relative_error(*a, *n) < GRAD_REL_TOL);
        }
    }

    #[test]
    fn batch_norm_batch_statistics(shape in small_shape(), seed in any::<u64>()) {
        // two samples normalize to exactly +-1, leaving only an eps-sized
        // gradient below finite-difference resolution
        prop_assume!(shape[0] * shape[1] * shape[2] >= 3);
        let x = random_map::<f64>(shape.clone(), seed, 1.0);
        let c = shape[3];
        let mut p = NormParams::identity(c, NormMode::BatchStatistics);
        p.gamma = random_map(vec![c], seed ^ 5, 1.0);
        p.beta = random_map(vec![c], seed ^ 6, 1.0);
        check_unary(&x, seed ^ 7, |t, i| t.batch_norm(&i, &p).unwrap())?;
    }

    #[test]
    fn gelu(shape in small_shape(), seed in any::<u64>()) {
        let x = random_map::<f64>(shape, seed, 1.0);
        check_unary(&x, seed ^ 8, |t, i| t.activation(&i, ActivationKind::Gelu).unwrap())?;
    }

    #[test]
    fn relu_away_from_kink(shape in small_shape(), seed in any::<u64>()) {
        let x = random_map::<f64>(shape, seed, 1.0).map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        check_unary(&x, seed ^ 9, |t, i| t.activation(&i, ActivationKind::Relu).unwrap())?;
    }

    #[test]
    fn gather_with_repeats_and_zeros(shape in small_shape(), seed in any::<u64>(), picks in proptest::collection::vec(0usize..64, 1..12)) {
        let x = random_map::<f64>(shape.clone(), seed, 1.0);
        let c = shape[3];
        let blocks = x.numel() / c;
        let src: Vec<usize> = picks.iter().map(|&k| if k % 7 == 0 { GatherMap::ZERO } else { k % blocks }).collect();
        let map = GatherMap::new(shape.clone(), vec![src.len(), c], c, src).unwrap();
        check_unary(&x, seed ^ 10, |t, i| t.gather(&i, map.clone()).unwrap())?;
    }

    #[test]
    fn add_reshape_mean(shape in small_shape(), seed in any::<u64>()) {
        let x = random_map::<f64>(shape.clone(), seed, 1.0);
        let other = random_map::<f64>(shape.clone(), seed ^ 11, 1.0);
        check_unary(&x, seed ^ 12, |t, i| {
            let o = t.leaf(other.clone());
            let s = t.add(&i, &o).unwrap();
            let d = t.add(&s, &i).unwrap();
            t.mean_tokens(&d).unwrap()
        })?;
        let n = x.numel();
        check_unary(&x, seed ^ 13, |t, i| t.reshape(&i, vec![n]).unwrap())?;
    }
}
