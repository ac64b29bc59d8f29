//! Fixtures shared by the benchmarks.

use granet::params::{BoundParams, ParamSpec};
use granet::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform `[-1, 1)` tensor from a fixed seed.
pub fn random_tensor(shape: [usize; 4], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Registers a small random tensor for every spec as a trainable parameter.
pub fn bind_random(g: &mut Graph<f32>, specs: &[ParamSpec], seed: u64) -> BoundParams {
    let mut p = BoundParams::new();
    for (i, s) in specs.iter().enumerate() {
        let scale = (1.0 / s.fan_in.max(1) as f32).sqrt();
        let t = random_tensor(s.shape, seed + i as u64).map(|v| v * scale);
        p.insert(s.name.clone(), g.param(t));
    }
    p
}
