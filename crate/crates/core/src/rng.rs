//! Deterministic counter-based randomness.
//!
//! Every random draw in the simulator flows through [`SeededRng`], a ChaCha12
//! stream cipher keyed by a 64-bit seed and positioned on a 64-bit stream id.
//! The same (seed, stream) pair yields the same sequence on every platform,
//! and distinct stream ids give statistically independent streams. Stream ids
//! are composed from a domain tag in the top byte plus a 56-bit index, so
//! subsystems can hand out per-record, per-client, or per-pair streams
//! without collisions.

pub use rand::RngCore;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Domain tags for [`stream_id`] composition. One tag per subsystem that
/// derives its own streams from a seed.
pub mod domain {
    pub const DATA_RECORD: u8 = 1;
    pub const COEFFICIENTS: u8 = 2;
    pub const PARTITION: u8 = 3;
    pub const SPLIT: u8 = 4;
    pub const MODEL_INIT: u8 = 5;
    pub const CLIENT_SHUFFLE: u8 = 6;
    pub const CLIENT_NOISE: u8 = 7;
    pub const MASK_PAIR: u8 = 8;
}

const INDEX_BITS: u32 = 56;
const INDEX_MASK: u64 = (1 << INDEX_BITS) - 1;

/// Composes a stream id from a domain tag and an index. The tag occupies the
/// top byte; the index must fit in 56 bits.
pub fn stream_id(tag: u8, index: u64) -> u64 {
    debug_assert!(index <= INDEX_MASK, "stream index exceeds 56 bits");
    ((tag as u64) << INDEX_BITS) | (index & INDEX_MASK)
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Splittable deterministic generator addressed by (seed, stream).
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha12Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        // Expand the 64-bit seed into a 256-bit cipher key; the stream id
        // selects an independent keystream for the same key.
        let mut state = seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        let mut inner = ChaCha12Rng::from_seed(key);
        inner.set_stream(stream);
        SeededRng {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in [0, 1) with 53 random bits.
    pub fn next_unit_f64(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Fisher-Yates shuffle consuming one draw per swap position.
    pub fn shuffle<T>(&mut self, values: &mut [T]) {
        for i in (1..values.len()).rev() {
            let j = (self.inner.next_u64() % (i as u64 + 1)) as usize;
            values.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
