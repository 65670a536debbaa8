//! Shared inputs for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossview_core::Tensor3;

/// Uniform `[-1, 1)` raster drawn from `seed`.
pub fn random_tensor(h: usize, w: usize, c: usize, seed: u64) -> Tensor3 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor3::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0))
}
