//! Inputs shared by the benchmarks.

use elf_core::Tensor;

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn feature_map(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("length matches shape")
}
