//! Seeded random tensors. ChaCha8 keeps streams identical across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Shape4, Tensor};

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)`.
pub fn uniform_tensor(shape: Shape4, lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = seeded(seed);
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("uniform_tensor shape")
}

/// Uniform values in `[-1, 1)`.
pub fn random_tensor(shape: Shape4, seed: u64) -> Tensor {
    uniform_tensor(shape, -1.0, 1.0, seed)
}
