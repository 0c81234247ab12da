//! Shared fixtures for the criterion benchmarks.

use metaformer_core::rng::SplitMix64;
use metaformer_core::Tensor;

/// Deterministic uniform `[-1, 1)` tensor.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(shape, |_| 2.0 * rng.next_f32() - 1.0)
}
