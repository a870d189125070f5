use hiremlp::init::random_map;
use hiremlp::rearrange::{
    cross_rearrange, cross_restore, crop, inner_rearrange, inner_restore, partition_pad,
    preserves_cyclic_order, token_permutation, Axis, PaddingMode, RegionSpec, ShiftSpec,
};
use hiremlp::FeatureMap;
use proptest::prelude::*;

fn axis() -> impl Strategy<Value = Axis> {
    prop_oneof![Just(Axis::Height), Just(Axis::Width)]
}

fn padding() -> impl Strategy<Value = PaddingMode> {
    prop::sample::select(PaddingMode::ALL.to_vec())
}

/// A map whose extent along `axis` is a multiple of `region`.
fn divisible(axis: Axis, region: usize, groups: usize, other: usize, c: usize, seed: u64) -> FeatureMap<f64> {
    let mut shape = vec![2, other, other, c];
    shape[axis.dim()] = region * groups;
    random_map(shape, seed, 1.0)
}

/// Naive inner rearrangement for the height axis: row r of region g holds
/// tokens (g*h .. g*h+h) concatenated along channels.
fn naive_inner_height(x: &FeatureMap<f64>, h: usize) -> Vec<f64> {
    let [n, hh, w, c] = x.dims4().unwrap();
    let mut out = Vec::new();
    for b in 0..n {
        for g in 0..hh / h {
            for col in 0..w {
                for j in 0..h {
                    for ch in 0..c {
                        out.push(x.get(&[b, g * h + j, col, ch]));
                    }
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn inner_roundtrip_is_bitwise(axis in axis(), region in 1usize..6, groups in 1usize..5, other in 1usize..6, c in 1usize..5, seed in any::<u64>()) {
        let x = divisible(axis, region, groups, other, c, seed);
        let spec = RegionSpec::new(axis, region, PaddingMode::Circular).unwrap();
        let y = inner_rearrange(&x, &spec).unwrap();
        prop_assert_eq!(y.multiset_checksum(), x.multiset_checksum());
        prop_assert_eq!(inner_restore(&y, &spec).unwrap(), x);
    }

    #[test]
    fn inner_matches_naive_layout(region in 1usize..5, groups in 1usize..4, w in 1usize..5, c in 1usize..4, seed in any::<u64>()) {
        let x = divisible(Axis::Height, region, groups, w, c, seed);
        let spec = RegionSpec::new(Axis::Height, region, PaddingMode::Zero).unwrap();
        let y = inner_rearrange(&x, &spec).unwrap();
        prop_assert_eq!(y.shape(), &[2, groups, w, region * c]);
        let expected = naive_inner_height(&x, region);
        prop_assert_eq!(y.data(), expected.as_slice());
    }

    #[test]
    fn cross_roundtrip_is_bitwise(axis in axis(), region in 1usize..6, groups in 1usize..5, other in 1usize..6, step in any::<usize>(), shuffle in any::<bool>(), seed in any::<u64>()) {
        let x = divisible(axis, region, groups, other, 2, seed);
        let extent = region * groups;
        let spec = RegionSpec::new(axis, region, PaddingMode::Circular).unwrap();
        let shift = if shuffle { ShiftSpec::shuffle() } else { ShiftSpec::shifted(step % extent) };
        let y = cross_rearrange(&x, &spec, &shift).unwrap();
        prop_assert_eq!(y.multiset_checksum(), x.multiset_checksum());
        prop_assert_eq!(cross_restore(&y, &spec, &shift).unwrap(), x);
    }

    #[test]
    fn shifted_moves_token_i_to_i_plus_s(extent in 1usize..30, step in any::<usize>()) {
        let s = step % extent;
        let dest = token_permutation(extent, &ShiftSpec::shifted(s), 1).unwrap();
        for (i, d) in dest.iter().enumerate() {
            prop_assert_eq!(*d, (i + s) % extent);
        }
        prop_assert!(preserves_cyclic_order(&dest));
    }

    #[test]
    fn shuffle_breaks_cyclic_order(region in 2usize..7, groups in 2usize..7) {
        let dest = token_permutation(region * groups, &ShiftSpec::shuffle(), region).unwrap();
        let mut sorted = dest.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..region * groups).collect::<Vec<_>>());
        prop_assert!(!preserves_cyclic_order(&dest));
    }

    #[test]
    fn pad_then_crop(axis in axis(), region in 1usize..6, extent in 1usize..12, mode in padding(), seed in any::<u64>()) {
        prop_assume!(!(mode == PaddingMode::Reflect && extent == 1));
        let mut shape = vec![1, 3, 3, 2];
        shape[axis.dim()] = extent;
        let x = random_map::<f64>(shape, seed, 1.0);
        let spec = RegionSpec::new(axis, region, mode).unwrap();
        let (p, rec) = partition_pad(&x, &spec).unwrap();
        prop_assert_eq!(p.shape()[axis.dim()], extent.div_ceil(region) * region);
        prop_assert_eq!(crop(&p, &rec).unwrap(), x);
    }

    #[test]
    fn circular_pad_wraps(region in 2usize..6, extent in 1usize..12, seed in any::<u64>()) {
        let x = random_map::<f64>(vec![1, extent, 2, 1], seed, 1.0);
        let spec = RegionSpec::new(Axis::Height, region, PaddingMode::Circular).unwrap();
        let (p, _) = partition_pad(&x, &spec).unwrap();
        for row in extent..p.shape()[1] {
            for col in 0..2 {
                prop_assert_eq!(p.get(&[0, row, col, 0]), x.get(&[0, row % extent, col, 0]));
            }
        }
    }
}

#[test]
fn step_at_extent_is_rejected() {
    assert!(token_permutation(4, &ShiftSpec::shifted(4), 1).is_err());
}
