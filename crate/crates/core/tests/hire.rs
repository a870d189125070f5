use hiremlp::gradcheck::check_layer_gradients;
use hiremlp::hire::{bottleneck_dims, hire_branch, hire_module, BottleneckMlp, BranchToggles, HireBranch, HireModule};
use hiremlp::init::{init_params, random_map};
use hiremlp::ops::{ActivationKind, LinearParams, NormMode};
use hiremlp::rearrange::{Axis, PaddingMode, RegionSpec, ShiftSpec};
use hiremlp::FeatureMap;
use proptest::prelude::*;

fn branch(axis: Axis, region: usize, c: usize, shift: Option<ShiftSpec>, padding: PaddingMode, seed: u64) -> HireBranch<f64> {
    let dims = bottleneck_dims(2, region, c).unwrap();
    let mut mlp = BottleneckMlp::zeros(&dims, ActivationKind::Gelu, true, NormMode::BatchStatistics).unwrap();
    init_params(&mut mlp, seed);
    // larger weights keep the loss well away from linear
    for t in hiremlp::params::Parameterized::learnable_mut(&mut mlp) {
        t.tensor.data_mut().iter_mut().for_each(|v| *v *= 20.0);
    }
    HireBranch::new(RegionSpec::new(axis, region, padding).unwrap(), shift, mlp)
}

fn module(c: usize, step: usize, seed: u64) -> HireModule<f64> {
    let shift = Some(ShiftSpec::shifted(step));
    let mut channel = LinearParams::zeros(c, c);
    init_params(&mut channel, seed);
    HireModule::new(
        branch(Axis::Height, 2, c, shift, PaddingMode::Circular, seed + 1),
        branch(Axis::Width, 3, c, shift, PaddingMode::Zero, seed + 2),
        channel,
    )
    .unwrap()
}

#[test]
fn branch_gradient_matches_finite_differences() {
    for (axis, padding) in [(Axis::Height, PaddingMode::Reflect), (Axis::Width, PaddingMode::Replicate)] {
        let mut b = branch(axis, 3, 4, Some(ShiftSpec::shifted(1)), padding, 3);
        let x = random_map::<f64>(vec![2, 5, 4, 4], 4, 1.0);
        let r = check_layer_gradients(&mut b, &x, 200, 5).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

#[test]
fn shuffle_branch_gradient() {
    let mut b = branch(Axis::Height, 2, 4, Some(ShiftSpec::shuffle()), PaddingMode::Circular, 6);
    let x = random_map::<f64>(vec![1, 7, 3, 4], 7, 1.0);
    let r = check_layer_gradients(&mut b, &x, 200, 8).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn module_gradient_matches_finite_differences() {
    let mut m = module(4, 1, 9);
    let x = random_map::<f64>(vec![1, 6, 5, 4], 10, 1.0);
    let r = check_layer_gradients(&mut m, &x, 300, 11).unwrap();
    assert!(r.passed(), "{r:?}");
}

#[test]
fn identity_channel_branch_alone_is_identity() {
    let mut m = module(6, 1, 12);
    m.channel = LinearParams::identity(6);
    m.toggles = BranchToggles { height: false, width: false, channel: true };
    let x = random_map::<f64>(vec![1, 5, 5, 6], 13, 1.0);
    assert_eq!(hire_module(&x, &m).unwrap(), x);
}

#[test]
fn zero_channel_branch_leaves_spatial_sum() {
    let mut m = module(4, 2, 14);
    m.channel = LinearParams::zeros(4, 4);
    let x = random_map::<f64>(vec![1, 7, 6, 4], 15, 1.0);
    let y = hire_module(&x, &m).unwrap();
    let h = hire_branch(&x, &m.height).unwrap();
    let w = hire_branch(&x, &m.width).unwrap();
    for i in 0..y.numel() {
        assert!((y.data()[i] - (h.data()[i] + w.data()[i])).abs() < 1e-6);
    }
}

#[test]
fn seven_by_seven_with_region_three() {
    let b = branch(Axis::Height, 3, 4, Some(ShiftSpec::shifted(1)), PaddingMode::Circular, 16);
    let x = random_map::<f64>(vec![1, 7, 7, 4], 17, 1.0);
    assert_eq!(hire_branch(&x, &b).unwrap().shape(), &[1, 7, 7, 4]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shape_is_preserved(h in 1usize..14, w in 1usize..14, c in 1usize..4, step in 0usize..4, seed in any::<u64>()) {
        let c = 2 * c;
        let m = module(c, step, seed % 1000);
        let x = random_map::<f64>(vec![1, h, w, c], seed, 1.0);
        let y = hire_module(&x, &m).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.all_finite());
    }

    #[test]
    fn zero_step_is_no_cross_region_step(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let a = module(4, 0, seed % 1000);
        let mut b = a.clone();
        b.height.shift = None;
        b.width.shift = None;
        let x = random_map::<f64>(vec![1, h, w, 4], seed, 1.0);
        let (ya, yb): (FeatureMap<f64>, FeatureMap<f64>) = (hire_module(&x, &a).unwrap(), hire_module(&x, &b).unwrap());
        prop_assert_eq!(ya, yb);
    }
}
