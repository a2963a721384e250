//! Counter-based random streams for replications.
//!
//! Every stream is a ChaCha8 generator whose key is derived from
//! `(base_seed, purpose, lane)` and whose 64-bit stream id is the replication
//! index. Streams for different replications therefore never overlap, and a
//! replication's draws do not depend on which thread runs it or in what
//! order replications execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Outcome lanes are per cell, so the k-th outcome
/// drawn in a cell is the same whatever the policy does elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Outcome,
    Policy,
    Covariate,
}

impl StreamPurpose {
    fn tag(self) -> u64 {
        match self {
            StreamPurpose::Outcome => 0x6f75_7463_6f6d_6531,
            StreamPurpose::Policy => 0x706f_6c69_6379_3031,
            StreamPurpose::Covariate => 0x636f_7661_7269_6174,
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for `(base_seed, replication, purpose, lane)`.
pub fn stream(base_seed: u64, replication: u64, purpose: StreamPurpose, lane: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(base_seed) ^ purpose.tag();
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        state = splitmix64(state ^ lane.wrapping_mul(0xd6e8_feb8_6659_fd93).wrapping_add(i as u64));
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(replication);
    rng
}
