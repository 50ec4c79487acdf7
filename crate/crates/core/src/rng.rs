//! Seeded random streams.
//!
//! Every consumer of randomness (data generation, class assignment,
//! partitioning, initialization, participation sampling) draws from its own
//! ChaCha stream derived from the experiment seed, so enabling or disabling
//! one consumer never shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifies an independent random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Synthetic = 1,
    Split = 2,
    Assignment = 3,
    Partition = 4,
    BackboneInit = 5,
    HeadInit = 6,
    Participation = 7,
    Fixture = 8,
}

/// Builds the generator for `stream`, sub-indexed by `index` (for example a
/// client id for per-client head initialization).
pub fn substream(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16..24].copy_from_slice(&(stream as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
