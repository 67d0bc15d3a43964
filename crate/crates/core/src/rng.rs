//! Keyed random streams.
//!
//! Every random decision in the crate draws from a stream derived from a
//! structured key rather than from a shared generator, so results do not
//! depend on the order in which independent tasks run.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Part of the key so that, say, the walk stream
/// and the dropout stream for the same indices never coincide.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Walk = 1,
    ViewSubset = 2,
    Shuffle = 3,
    Dropout = 4,
    Init = 5,
    Synthetic = 6,
    Aux = 7,
}

/// Stream key: `(base_seed, subgraph_index, view_index, epoch)` within a
/// domain. Epoch `-1` is reserved for evaluation-time sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub domain: Domain,
    pub seed: u64,
    pub subgraph: u64,
    pub view: u64,
    pub epoch: i64,
}

impl StreamKey {
    pub fn new(domain: Domain, seed: u64, subgraph: u64, view: u64, epoch: i64) -> Self {
        StreamKey {
            domain,
            seed,
            subgraph,
            view,
            epoch,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A ChaCha8 stream whose 256-bit seed is a hash of the key.
#[derive(Debug, Clone)]
pub struct RngStream {
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(key: StreamKey) -> Self {
        let words = [key.domain as u64, key.seed, key.subgraph, key.view, key.epoch as u64];
        let mut state = 0u64;
        let mut seed = [0u8; 32];
        for (lane, chunk) in seed.chunks_exact_mut(8).enumerate() {
            for &w in &words {
                state = splitmix64(state ^ w);
            }
            state = splitmix64(state ^ lane as u64);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        RngStream {
            inner: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn keyed(domain: Domain, seed: u64, subgraph: u64, view: u64, epoch: i64) -> Self {
        Self::new(StreamKey::new(domain, seed, subgraph, view, epoch))
    }

    /// Uniform index in `0..n`. `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }
}

impl RngCore for RngStream {
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
