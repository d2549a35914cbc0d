//! Named RNG streams derived from a single run seed.
//!
//! Every consumer of randomness gets its own ChaCha stream keyed by a stable
//! hash of `(run_seed, stream, a, b)`. Streams never share state, so adding a
//! consumer or reordering client execution does not perturb any other stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Model initialization for slot `index`.
    Init { index: usize },
    /// Data partitioning.
    Partition,
    /// Synthetic data generation.
    Synthetic,
    /// Peer selection for a client within a round.
    Select { client: usize, round: usize },
    /// Mini-batch shuffling for a client within a round.
    Shuffle { client: usize, round: usize },
    /// Fine-tuning after the final round.
    Finetune { client: usize },
}

impl Stream {
    fn key(self) -> (u64, u64, u64) {
        match self {
            Stream::Init { index } => (1, index as u64, 0),
            Stream::Partition => (2, 0, 0),
            Stream::Synthetic => (3, 0, 0),
            Stream::Select { client, round } => (4, client as u64, round as u64),
            Stream::Shuffle { client, round } => (5, client as u64, round as u64),
            Stream::Finetune { client } => (6, client as u64, 0),
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for `stream` under `run_seed`.
pub fn derive_seed(run_seed: u64, stream: Stream) -> u64 {
    let (tag, a, b) = stream.key();
    let mut h = splitmix64(run_seed);
    for word in [tag, a, b] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream_rng(run_seed: u64, stream: Stream) -> SimRng {
    SimRng::seed_from_u64(derive_seed(run_seed, stream))
}
