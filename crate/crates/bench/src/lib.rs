//! Fixtures shared by the criterion benches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s3pet_core::tensor::Tensor;
use s3pet_core::volume::ImageSlice;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("shape and data agree")
}

pub fn random_slices(n: usize, side: usize, seed: u64) -> Vec<ImageSlice> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ImageSlice {
            height: side,
            width: side,
            data: (0..side * side).map(|_| rng.random()).collect(),
        })
        .collect()
}
