//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srseg::data::generate_dataset;
use srseg::train::Batch;
use srseg::{DatasetConfig, ModelConfig, Real, Tensor};

/// Tensor of uniform values in `[-1, 1)`.
pub fn random_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_f64(shape, &data).expect("shape matches data")
}

/// A training batch of `size` synthetic samples at the model's input size.
pub fn synthetic_batch<T: Real>(model: &ModelConfig, size: usize) -> Batch<T> {
    let [height, width] = model.input_size;
    let samples = generate_dataset(&DatasetConfig {
        count: size,
        height,
        width,
        ..DatasetConfig::default()
    });
    Batch::from_samples(&samples.iter().collect::<Vec<_>>()).expect("uniform samples")
}
