//! Counter-based random streams.
//!
//! A draw is a pure function of `(seed, stream, counter)`: the stream key is
//! derived from seed and stream id, and the value at a counter is the
//! SplitMix64 output for state `key + counter·γ`. Nothing depends on call
//! order, so a dropout mask entry keyed by (layer, step, global node, column)
//! comes out the same whether the node is processed in a full batch or in a
//! micro-batch, and on any platform.
//!
//! Sequential consumers (parameter init, permutations, synthetic data) get a
//! `ChaCha8Rng` seeded from a stream via [`RngStream::chacha`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    counter: u64,
    key: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let key = mix64(seed ^ mix64(stream.wrapping_mul(GAMMA).wrapping_add(0x6a09_e667_f3bc_c909)));
        Self {
            seed,
            stream,
            counter: 0,
            key,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Same stream positioned at `counter`.
    pub fn at(mut self, counter: u64) -> Self {
        self.counter = counter;
        self
    }

    /// Derives an independent child stream identified by `id`.
    pub fn fork(&self, id: u64) -> Self {
        let key = mix64(self.key ^ mix64(id.wrapping_add(GAMMA)).rotate_left(17));
        Self {
            seed: self.seed,
            stream: id,
            counter: 0,
            key,
        }
    }

    #[inline]
    pub fn u64_at(&self, counter: u64) -> u64 {
        mix64(self.key.wrapping_add(counter.wrapping_add(1).wrapping_mul(GAMMA)))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn uniform_at(&self, counter: u64) -> f64 {
        (self.u64_at(counter) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = self.u64_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn next_uniform(&mut self) -> f64 {
        let v = self.uniform_at(self.counter);
        self.counter += 1;
        v
    }

    pub fn chacha(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.u64_at(u64::MAX))
    }
}
