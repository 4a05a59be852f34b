//! Shared fixtures for the benchmark targets.

use v2d_core::tensor::Tensor;

/// Deterministic dense tensor; benchmarks must not depend on rng state.
pub fn filled(shape: &[usize]) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| ((i * 37 + 11) as f32 * 0.01).sin()).collect();
    Tensor::from_vec(shape, data).unwrap()
}
