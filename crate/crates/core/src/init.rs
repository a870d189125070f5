//! Deterministic parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::params::{Parameterized, TensorKind};
use crate::tensor::{Element, FeatureMap};

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) resampled until it lands within two standard deviations.
pub fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn random_map<T: Element>(shape: impl Into<Vec<usize>>, seed: u64, std: f64) -> FeatureMap<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureMap::from_fn(shape, |_| T::of(truncated_normal(&mut rng, std)))
}

/// Weights from the truncated normal, biases and shifts zero, scales one,
/// running statistics reset to (0, 1).
pub fn init_params<T: Element, P: Parameterized<T> + ?Sized>(p: &mut P, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in p.tensors_mut() {
        let name = t.path.rsplit('.').next().unwrap_or("");
        match (t.kind, name) {
            (TensorKind::Learnable, "weight") => t
                .tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = T::of(truncated_normal(&mut rng, INIT_STD))),
            (_, "gamma" | "running_var") => t.tensor.data_mut().fill(T::one()),
            _ => t.tensor.data_mut().fill(T::zero()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::LinearParams;

    #[test]
    fn truncated_within_two_sigma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..10_000).map(|_| truncated_normal(&mut rng, 0.02)).collect();
        assert!(xs.iter().all(|x| x.abs() <= 0.04));
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn seeded_and_zero_bias() {
        let mut a = LinearParams::<f32>::zeros(4, 3);
        let mut b = LinearParams::<f32>::zeros(4, 3);
        init_params(&mut a, 9);
        init_params(&mut b, 9);
        assert_eq!(a, b);
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        assert!(a.weight.data().iter().any(|&v| v != 0.0));
    }
}
