//! Weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Glorot uniform limit: sqrt(6 / (fan_in + fan_out)).
pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Draws `n` values uniformly from [-L, L] with L the Glorot limit.
pub fn glorot_uniform(fan_in: usize, fan_out: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let limit = glorot_limit(fan_in, fan_out);
    (0..n).map(|_| rng.gen_range(-limit..=limit)).collect()
}
