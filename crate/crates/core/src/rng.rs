//! Seeded random streams. Every consumer derives its own ChaCha stream from
//! `(seed, stream)` so results never depend on call order across workers or
//! on how many steps ran before a resume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw in `[0, 1)`.
pub fn uniform(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    rng.gen::<f64>()
}

/// Uniform draw in `[lo, hi)`.
pub fn uniform_range(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

pub fn index(rng: &mut Rng, n: usize) -> usize {
    use rand::Rng as _;
    rng.gen_range(0..n)
}
