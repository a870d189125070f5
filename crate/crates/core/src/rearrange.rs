//! Token rearrangements along one spatial axis of an `(N, H, W, C)` map.
//!
//! Two levels:
//!
//! * inner-region: the axis is split into regions of `h` consecutive tokens
//!   and each region's tokens are concatenated along the channel axis, so a
//!   single fully connected layer mixes them. [`inner_restore`] splits them
//!   back.
//! * cross-region: tokens are moved between regions, either by a circular
//!   shift of `s` tokens (the token at `i` moves to `(i + s) mod E`) or by the
//!   shuffle manner, which transposes the `(region, offset)` factorization of
//!   the token index. [`cross_restore`] applies the exact inverse.
//!
//! When the extent is not a multiple of the region size the axis is first
//! padded at its end ([`partition_pad`]) and cropped back afterwards
//! ([`crop`]).
//!
//! All transforms are explicit index-mapped copies expressed as
//! [`GatherMap`]s, so they run unchanged on every [`crate::graph::Graph`]
//! backend. The `*_map` builders produce the maps; the plain functions apply
//! them eagerly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{gather, GatherMap};
use crate::tensor::{Element, FeatureMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Height,
    Width,
}

impl Axis {
    /// Position of the axis in an `(N, H, W, C)` shape.
    pub fn dim(self) -> usize {
        match self {
            Axis::Height => 1,
            Axis::Width => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Height => "height",
            Axis::Width => "width",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Zero,
    #[default]
    Circular,
    Reflect,
    Replicate,
}

impl PaddingMode {
    pub const ALL: [PaddingMode; 4] = [
        PaddingMode::Zero,
        PaddingMode::Circular,
        PaddingMode::Reflect,
        PaddingMode::Replicate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PaddingMode::Zero => "zero",
            PaddingMode::Circular => "circular",
            PaddingMode::Reflect => "reflect",
            PaddingMode::Replicate => "replicate",
        }
    }
}

/// Region partition of one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub axis: Axis,
    pub region_size: usize,
    pub padding: PaddingMode,
}

impl RegionSpec {
    pub fn new(axis: Axis, region_size: usize, padding: PaddingMode) -> Result<Self> {
        if region_size == 0 {
            return Err(Error::invalid("region size must be at least 1"));
        }
        Ok(Self {
            axis,
            region_size,
            padding,
        })
    }

    /// Least multiple of the region size that covers `extent`.
    pub fn padded_extent(&self, extent: usize) -> usize {
        extent.div_ceil(self.region_size) * self.region_size
    }

    /// Number of regions `g` after padding.
    pub fn region_count(&self, extent: usize) -> usize {
        extent.div_ceil(self.region_size)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftManner {
    /// Circular shift; keeps the cyclic order of tokens.
    #[default]
    Shifted,
    /// Transpose of the `(region, offset)` factorization, the token analogue
    /// of a channel shuffle. The step size is ignored.
    Shuffle,
}

impl ShiftManner {
    pub fn name(self) -> &'static str {
        match self {
            ShiftManner::Shifted => "shifted",
            ShiftManner::Shuffle => "shuffle",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub step: usize,
    pub manner: ShiftManner,
}

impl ShiftSpec {
    pub fn shifted(step: usize) -> Self {
        Self {
            step,
            manner: ShiftManner::Shifted,
        }
    }

    pub fn shuffle() -> Self {
        Self {
            step: 0,
            manner: ShiftManner::Shuffle,
        }
    }
}

/// What [`partition_pad`] did, so [`crop`] can undo it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadRecord {
    pub axis: Axis,
    pub original: usize,
    pub padded: usize,
}

fn dims4(shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, h, w, c] => Ok([n, h, w, c]),
        _ => Err(Error::invalid(format!(
            "expected a rank-4 (N, H, W, C) map, got shape {shape:?}"
        ))),
    }
}

/// Source index for position `i` (possibly outside `[0, n)`) of a padded
/// axis of length `n`, or `None` for a zero fill.
pub fn pad_index(i: isize, n: usize, mode: PaddingMode) -> Result<Option<usize>> {
    let len = n as isize;
    if (0..len).contains(&i) {
        return Ok(Some(i as usize));
    }
    if n == 0 {
        return Err(Error::invalid("cannot pad an empty axis"));
    }
    Ok(match mode {
        PaddingMode::Zero => None,
        PaddingMode::Circular => Some(i.rem_euclid(len) as usize),
        PaddingMode::Replicate => Some(i.clamp(0, len - 1) as usize),
        PaddingMode::Reflect => {
            if n == 1 {
                return Err(Error::invalid(
                    "reflect padding needs an extent of at least 2",
                ));
            }
            let period = 2 * (len - 1);
            let m = i.rem_euclid(period);
            Some(if m < len { m } else { period - m } as usize)
        }
    })
}

/// Gather over one axis: the output has `out_extent` tokens along `axis`,
/// token `i` copied from input token `src(i)` (or zero-filled).
pub fn axis_gather_map(
    shape: &[usize],
    axis: Axis,
    out_extent: usize,
    mut src: impl FnMut(usize) -> Option<usize>,
) -> Result<GatherMap> {
    let [n, h, w, c] = dims4(shape)?;
    let mut out_shape = shape.to_vec();
    out_shape[axis.dim()] = out_extent;
    let tokens: Vec<usize> = (0..out_extent)
        .map(|i| src(i).unwrap_or(GatherMap::ZERO))
        .collect();
    let mut map = Vec::with_capacity(out_shape.iter().product::<usize>() / c.max(1));
    match axis {
        Axis::Height => {
            for b in 0..n {
                for &t in &tokens {
                    for x in 0..w {
                        map.push(if t == GatherMap::ZERO {
                            t
                        } else {
                            (b * h + t) * w + x
                        });
                    }
                }
            }
        }
        Axis::Width => {
            for b in 0..n {
                for y in 0..h {
                    for &t in &tokens {
                        map.push(if t == GatherMap::ZERO {
                            t
                        } else {
                            (b * h + y) * w + t
                        });
                    }
                }
            }
        }
    }
    GatherMap::new(shape.to_vec(), out_shape, c.max(1), map)
}

pub fn partition_pad_map(shape: &[usize], spec: &RegionSpec) -> Result<(GatherMap, PadRecord)> {
    let dims = dims4(shape)?;
    if dims.iter().product::<usize>() == 0 {
        return Err(Error::invalid(format!("cannot partition an empty map {shape:?}")));
    }
    let original = dims[spec.axis.dim()];
    let padded = spec.padded_extent(original);
    let mut sources = Vec::with_capacity(padded);
    for i in 0..padded {
        sources.push(pad_index(i as isize, original, spec.padding)?);
    }
    let map = axis_gather_map(shape, spec.axis, padded, |i| sources[i])?;
    Ok((
        map,
        PadRecord {
            axis: spec.axis,
            original,
            padded,
        },
    ))
}

pub fn crop_map(shape: &[usize], record: &PadRecord) -> Result<GatherMap> {
    let dims = dims4(shape)?;
    if dims[record.axis.dim()] != record.padded {
        return Err(Error::Shape {
            op: "crop",
            expected: vec![record.padded],
            got: vec![dims[record.axis.dim()]],
        });
    }
    axis_gather_map(shape, record.axis, record.original, Some)
}

/// Pads the spec's axis at its end up to a multiple of the region size.
pub fn partition_pad<T: Element>(
    x: &FeatureMap<T>,
    spec: &RegionSpec,
) -> Result<(FeatureMap<T>, PadRecord)> {
    let (map, record) = partition_pad_map(x.shape(), spec)?;
    Ok((gather(x, &map)?, record))
}

/// Drops the tokens added by [`partition_pad`].
pub fn crop<T: Element>(x: &FeatureMap<T>, record: &PadRecord) -> Result<FeatureMap<T>> {
    gather(x, &crop_map(x.shape(), record)?)
}

pub fn inner_rearrange_map(shape: &[usize], axis: Axis, region: usize) -> Result<GatherMap> {
    let [n, h, w, c] = dims4(shape)?;
    let extent = shape[axis.dim()];
    if region == 0 || !extent.is_multiple_of(region) {
        return Err(Error::NotDivisible {
            op: "inner_rearrange",
            axis: axis.name(),
            extent,
            region,
        });
    }
    let g = extent / region;
    let mut src = Vec::with_capacity(n * h * w);
    let out_shape = match axis {
        Axis::Height => {
            for b in 0..n {
                for r in 0..g {
                    for x in 0..w {
                        for j in 0..region {
                            src.push((b * h + r * region + j) * w + x);
                        }
                    }
                }
            }
            vec![n, g, w, region * c]
        }
        Axis::Width => {
            for b in 0..n {
                for y in 0..h {
                    for r in 0..g {
                        for j in 0..region {
                            src.push((b * h + y) * w + r * region + j);
                        }
                    }
                }
            }
            vec![n, h, g, region * c]
        }
    };
    GatherMap::new(shape.to_vec(), out_shape, c.max(1), src)
}

pub fn inner_restore_map(shape: &[usize], axis: Axis, region: usize) -> Result<GatherMap> {
    let [n, a, b, rc] = dims4(shape)?;
    if region == 0 || rc % region != 0 {
        return Err(Error::Shape {
            op: "inner_restore",
            expected: vec![region, rc / region.max(1)],
            got: shape.to_vec(),
        });
    }
    let c = rc / region;
    let (h, w) = match axis {
        Axis::Height => (a * region, b),
        Axis::Width => (a, b * region),
    };
    // Invert the forward map: out block (n, y, x) <- rearranged block index.
    let forward = inner_rearrange_map(&[n, h, w, c], axis, region)?;
    let mut src = vec![0usize; forward.src.len()];
    for (i, &s) in forward.src.iter().enumerate() {
        src[s] = i;
    }
    GatherMap::new(shape.to_vec(), vec![n, h, w, c], c.max(1), src)
}

/// `[N, H, W, C] -> [N, H/h, W, h*C]` (height) or `[N, H, W/w, w*C]` (width).
pub fn inner_rearrange<T: Element>(x: &FeatureMap<T>, spec: &RegionSpec) -> Result<FeatureMap<T>> {
    gather(x, &inner_rearrange_map(x.shape(), spec.axis, spec.region_size)?)
}

/// Exact inverse of [`inner_rearrange`].
pub fn inner_restore<T: Element>(y: &FeatureMap<T>, spec: &RegionSpec) -> Result<FeatureMap<T>> {
    gather(y, &inner_restore_map(y.shape(), spec.axis, spec.region_size)?)
}

/// Destination of each token under the cross-region rearrangement:
/// `dest[i]` is where token `i` ends up.
pub fn token_permutation(extent: usize, shift: &ShiftSpec, region: usize) -> Result<Vec<usize>> {
    match shift.manner {
        ShiftManner::Shifted => {
            if extent == 0 || shift.step >= extent {
                return Err(Error::invalid(format!(
                    "shift step {} must be smaller than the axis extent {extent}",
                    shift.step
                )));
            }
            Ok((0..extent).map(|i| (i + shift.step) % extent).collect())
        }
        ShiftManner::Shuffle => {
            if region == 0 || !extent.is_multiple_of(region) {
                return Err(Error::NotDivisible {
                    op: "cross_rearrange[shuffle]",
                    axis: "token",
                    extent,
                    region,
                });
            }
            let g = extent / region;
            Ok((0..extent)
                .map(|t| {
                    let (r, j) = (t / region, t % region);
                    j * g + r
                })
                .collect())
        }
    }
}

fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &d) in perm.iter().enumerate() {
        inv[d] = i;
    }
    inv
}

/// True when `dest` maps every pair of cyclically adjacent tokens to
/// cyclically adjacent positions in the same order.
pub fn preserves_cyclic_order(dest: &[usize]) -> bool {
    let n = dest.len();
    (0..n).all(|i| dest[(i + 1) % n] == (dest[i] + 1) % n)
}

pub fn cross_rearrange_map(shape: &[usize], region: &RegionSpec, shift: &ShiftSpec) -> Result<GatherMap> {
    let dims = dims4(shape)?;
    let extent = dims[region.axis.dim()];
    let dest = token_permutation(extent, shift, region.region_size)?;
    let src = invert(&dest);
    axis_gather_map(shape, region.axis, extent, |p| Some(src[p]))
}

pub fn cross_restore_map(shape: &[usize], region: &RegionSpec, shift: &ShiftSpec) -> Result<GatherMap> {
    let dims = dims4(shape)?;
    let extent = dims[region.axis.dim()];
    let dest = token_permutation(extent, shift, region.region_size)?;
    axis_gather_map(shape, region.axis, extent, |p| Some(dest[p]))
}

/// Moves tokens across regions along `region.axis`.
pub fn cross_rearrange<T: Element>(
    x: &FeatureMap<T>,
    region: &RegionSpec,
    shift: &ShiftSpec,
) -> Result<FeatureMap<T>> {
    gather(x, &cross_rearrange_map(x.shape(), region, shift)?)
}

/// Exact inverse of [`cross_rearrange`].
pub fn cross_restore<T: Element>(
    x: &FeatureMap<T>,
    region: &RegionSpec,
    shift: &ShiftSpec,
) -> Result<FeatureMap<T>> {
    gather(x, &cross_restore_map(x.shape(), region, shift)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn height(h: usize, padding: PaddingMode) -> RegionSpec {
        RegionSpec::new(Axis::Height, h, padding).unwrap()
    }

    /// Map with value `10*i + w` at `[0, i, w, 0]`.
    fn indexed(h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_fn(vec![1, h, w, 1], |k| (10 * (k / w) + k % w) as f64)
    }

    #[test]
    fn divisible_extent_is_not_padded() {
        let x = FeatureMap::<f32>::zeros(vec![1, 8, 3, 2]);
        let (y, rec) = partition_pad(&x, &height(4, PaddingMode::Zero)).unwrap();
        assert_eq!((rec.original, rec.padded), (8, 8));
        assert_eq!(y, x);
    }

    #[test]
    fn circular_padding_wraps_from_top() {
        let x = indexed(7, 2);
        let (y, rec) = partition_pad(&x, &height(2, PaddingMode::Circular)).unwrap();
        assert_eq!(rec.padded, 8);
        for i in 0..8 {
            for w in 0..2 {
                assert_eq!(y.get(&[0, i, w, 0]), x.get(&[0, i % 7, w, 0]));
            }
        }
    }

    #[test]
    fn zero_reflect_replicate_fills() {
        let x = indexed(7, 1);
        let (z, _) = partition_pad(&x, &height(2, PaddingMode::Zero)).unwrap();
        assert_eq!(z.get(&[0, 7, 0, 0]), 0.0);
        let (r, _) = partition_pad(&x, &height(4, PaddingMode::Reflect)).unwrap();
        // rows 7 <- 5 (mirror without repeating the edge)
        assert_eq!(r.get(&[0, 7, 0, 0]), 50.0);
        let (p, _) = partition_pad(&x, &height(4, PaddingMode::Replicate)).unwrap();
        assert_eq!(p.get(&[0, 7, 0, 0]), 60.0);
    }

    #[test]
    fn reflect_rejects_single_token_axis() {
        let x = FeatureMap::<f32>::zeros(vec![1, 1, 3, 2]);
        assert!(partition_pad(&x, &height(2, PaddingMode::Reflect)).is_err());
        // nothing to pad -> fine
        assert!(partition_pad(&x, &height(1, PaddingMode::Reflect)).is_ok());
    }

    #[test]
    fn inner_rearrange_index_map() {
        let x = indexed(4, 2);
        let y = inner_rearrange(&x, &height(2, PaddingMode::Zero)).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        // out[n, r, w, j*C + c] = x[n, r*h + j, w, c]
        for r in 0..2 {
            for w in 0..2 {
                for j in 0..2 {
                    assert_eq!(y.get(&[0, r, w, j]), x.get(&[0, r * 2 + j, w, 0]));
                }
            }
        }
        assert_eq!(&y.data()[0..2], &[0.0, 10.0]);
        assert_eq!(y.get(&[0, 1, 1, 0]), 21.0);
        assert_eq!(y.get(&[0, 1, 1, 1]), 31.0);
    }

    #[test]
    fn width_variant_mirrors_height() {
        let x = FeatureMap::<f64>::from_fn(vec![2, 3, 6, 2], |i| i as f64);
        let spec = RegionSpec::new(Axis::Width, 3, PaddingMode::Zero).unwrap();
        let y = inner_rearrange(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 6]);
        for b in 0..2 {
            for i in 0..3 {
                for r in 0..2 {
                    for j in 0..3 {
                        for c in 0..2 {
                            assert_eq!(y.get(&[b, i, r, j * 2 + c]), x.get(&[b, i, r * 3 + j, c]));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn singleton_regions_keep_values() {
        let x = FeatureMap::<f32>::from_fn(vec![2, 3, 4, 5], |i| i as f32);
        let y = inner_rearrange(&x, &height(1, PaddingMode::Zero)).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn inner_rearrange_requires_divisible_extent() {
        let x = FeatureMap::<f32>::zeros(vec![1, 7, 2, 1]);
        match inner_rearrange(&x, &height(2, PaddingMode::Zero)) {
            Err(Error::NotDivisible { axis, .. }) => assert_eq!(axis, "height"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn restore_inverts_rearrange() {
        let x = FeatureMap::<f64>::from_fn(vec![1, 6, 5, 3], |i| i as f64);
        for spec in [height(3, PaddingMode::Zero), RegionSpec::new(Axis::Width, 5, PaddingMode::Zero).unwrap()] {
            let y = inner_rearrange(&x, &spec).unwrap();
            assert_eq!(inner_restore(&y, &spec).unwrap(), x);
        }
        let zeros = FeatureMap::<f32>::zeros(vec![1, 2, 5, 6]);
        let back = inner_restore(&zeros, &height(3, PaddingMode::Zero)).unwrap();
        assert_eq!(back, FeatureMap::zeros(vec![1, 6, 5, 2]));
    }

    #[test]
    fn unit_shift_moves_rows_down() {
        // rows [a, b, c, d] -> [d, a, b, c]
        let x = indexed(4, 1);
        let spec = height(2, PaddingMode::Zero);
        let y = cross_rearrange(&x, &spec, &ShiftSpec::shifted(1)).unwrap();
        assert_eq!(y.data(), &[30.0, 0.0, 10.0, 20.0]);
        assert_eq!(cross_restore(&y, &spec, &ShiftSpec::shifted(1)).unwrap(), x);
    }

    #[test]
    fn zero_shift_and_full_cycle_are_identity() {
        let x = FeatureMap::<f32>::from_fn(vec![2, 5, 3, 2], |i| i as f32);
        let spec = height(1, PaddingMode::Zero);
        assert_eq!(cross_rearrange(&x, &spec, &ShiftSpec::shifted(0)).unwrap(), x);
        let mut y = x.clone();
        for _ in 0..5 {
            y = cross_rearrange(&y, &spec, &ShiftSpec::shifted(1)).unwrap();
        }
        assert_eq!(y, x);
    }

    #[test]
    fn shift_step_must_be_below_extent() {
        let x = FeatureMap::<f32>::zeros(vec![1, 4, 4, 1]);
        let spec = height(2, PaddingMode::Zero);
        assert!(cross_rearrange(&x, &spec, &ShiftSpec::shifted(4)).is_err());
    }

    #[test]
    fn shuffle_transposes_region_offset() {
        // H = 6, h = 2: g = 3, token r*2 + j -> j*3 + r
        let dest = token_permutation(6, &ShiftSpec::shuffle(), 2).unwrap();
        assert_eq!(dest, vec![0, 3, 1, 4, 2, 5]);
        let x = indexed(6, 1);
        let spec = height(2, PaddingMode::Zero);
        let y = cross_rearrange(&x, &spec, &ShiftSpec::shuffle()).unwrap();
        assert_eq!(y.data(), &[0.0, 20.0, 40.0, 10.0, 30.0, 50.0]);
        assert_eq!(cross_restore(&y, &spec, &ShiftSpec::shuffle()).unwrap(), x);
    }

    #[test]
    fn cyclic_order_checker() {
        assert!(preserves_cyclic_order(&token_permutation(7, &ShiftSpec::shifted(3), 1).unwrap()));
        assert!(!preserves_cyclic_order(&token_permutation(6, &ShiftSpec::shuffle(), 2).unwrap()));
        // degenerate factorizations are order-preserving
        assert!(preserves_cyclic_order(&token_permutation(6, &ShiftSpec::shuffle(), 1).unwrap()));
        assert!(preserves_cyclic_order(&token_permutation(6, &ShiftSpec::shuffle(), 6).unwrap()));
    }

    #[test]
    fn pad_then_crop_is_identity_for_every_mode() {
        let x = FeatureMap::<f64>::from_fn(vec![2, 5, 7, 3], |i| (i as f64).sqrt());
        for mode in PaddingMode::ALL {
            for axis in [Axis::Height, Axis::Width] {
                let spec = RegionSpec::new(axis, 3, mode).unwrap();
                let (p, rec) = partition_pad(&x, &spec).unwrap();
                assert_eq!(crop(&p, &rec).unwrap(), x);
            }
        }
    }
}
