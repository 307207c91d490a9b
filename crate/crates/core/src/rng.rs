//! Seeded counter-based random streams.
//!
//! Every consumer draws from its own ChaCha stream derived from
//! `(seed, purpose)`, so adding draws in one place never shifts another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Params = 1,
    MemoryValues = 2,
    Training = 3,
    Data = 4,
    Forget = 5,
    Encoder = 6,
    Attacker = 7,
    Probe = 8,
}

pub fn stream(seed: u64, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// `n` draws from `N(0, std^2)`.
pub fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f32> {
    let dist = Normal::new(0.0, std).expect("std is finite and non-negative");
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}
