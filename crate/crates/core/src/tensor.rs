//! Dense row-major arrays with the last axis varying fastest.
//!
//! A [`FeatureMap`] is the only storage type in the crate. Rank-4 maps are
//! laid out as `(batch, height, width, channels)`; parameters use the same
//! type with rank 1 or 2. Precision is a type parameter: `f32` for inference
//! and benchmarks, `f64` for gradient checks.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element usable in every op of the crate.
pub trait Element: Float + Debug + Default + Send + Sync + 'static {
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a @ b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn erf(self) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $name:literal, $gemm:path, $erf:path) => {
        impl Element for $t {
            const NAME: &'static str = $name;

            fn of(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(m, k, rsa, csa, a.len());
                check_extent(k, n, rsb, csb, b.len());
                check_extent(m, n, rsc, csc, c.len());
                // SAFETY: every index reachable through (m, k, n) and the
                // strides was bounds-checked against the slices above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }

            fn erf(self) -> Self {
                $erf(self)
            }
        }
    };
}

fn check_extent(rows: usize, cols: usize, rs: isize, cs: isize, len: usize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(last < len, "gemm operand out of bounds: {last} >= {len}");
}

impl_element!(f32, "f32", matrixmultiply::sgemm, libm::erff);
impl_element!(f64, "f64", matrixmultiply::dgemm, libm::erf);

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> FeatureMap<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Size of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                expected: self.shape,
                got: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// `(N, H, W, C)` of a rank-4 map.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(Error::invalid(format!(
                "expected a rank-4 (N, H, W, C) map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn cast<U: Element>(&self) -> FeatureMap<U> {
        FeatureMap {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-sensitive content hash of the exact bit patterns, for
    /// determinism and no-mutation checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &d in &self.shape {
            h = fnv_step(h, d as u64);
        }
        for v in &self.data {
            h = fnv_step(h, v.as_f64().to_bits());
        }
        h
    }

    /// Order-insensitive sum of element bit patterns. Two maps related by a
    /// permutation of elements have equal multiset checksums.
    pub fn multiset_checksum(&self) -> u64 {
        self.data.iter().fold(0u64, |acc, v| {
            acc.wrapping_add(splitmix(v.as_f64().to_bits()))
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }
}

fn fnv_step(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01b3)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match() {
        assert!(FeatureMap::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let m = FeatureMap::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(m.numel(), 6);
    }

    #[test]
    fn offsets_are_row_major_channels_last() {
        let m = FeatureMap::<f64>::from_fn(vec![2, 3, 4, 5], |i| i as f64);
        assert_eq!(m.get(&[0, 0, 0, 1]), 1.0);
        assert_eq!(m.get(&[0, 0, 1, 0]), 5.0);
        assert_eq!(m.get(&[0, 1, 0, 0]), 20.0);
        assert_eq!(m.get(&[1, 0, 0, 0]), 60.0);
    }

    #[test]
    fn multiset_checksum_ignores_order() {
        let a = FeatureMap::<f32>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = FeatureMap::<f32>::new(vec![3], vec![3.0, 1.0, 2.0]).unwrap();
        let c = FeatureMap::<f32>::new(vec![3], vec![3.0, 3.0, 2.0]).unwrap();
        assert_eq!(a.multiset_checksum(), b.multiset_checksum());
        assert_ne!(a.checksum(), b.checksum());
        assert_ne!(a.multiset_checksum(), c.multiset_checksum());
    }

    #[test]
    fn gemm_with_transposed_operand() {
        // a = [[1, 2], [3, 4]], b^T read from row-major [[5, 6], [7, 8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, 1.0, &a, 2, 1, &b, 1, 2, 0.0, &mut c, 2, 1);
        // a @ b^T
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
