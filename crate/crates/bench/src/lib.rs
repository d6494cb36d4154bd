//! Seeded fixtures shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use nextdit::dit::{DitConfig, ModelParams};
use nextdit::Tensor;

/// Standard-normal tensor of the given shape.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng))
}

/// Parameters with every leaf (gates included) drawn at random, so no branch
/// is short-circuited by a zero gate.
pub fn random_params(cfg: &DitConfig, seed: u64) -> ModelParams<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(cfg, &mut rng);
    params.randomize(&mut rng, 0.1);
    params
}
