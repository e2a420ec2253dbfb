use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Seeded counter-based generator: `(seed, stream)` fully determines the
/// sequence, and streams are independent of each other.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Hands out a fresh stream per call so repeated stochastic ops (dropout
/// masks, shuffles) are reproducible from `(seed, counter)` alone.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StreamRng {
    pub seed: u64,
    pub counter: u64,
}

impl StreamRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn next_stream(&mut self) -> ChaCha8Rng {
        self.counter += 1;
        stream(self.seed, self.counter)
    }
}
