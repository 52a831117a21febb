//! Seeded random streams. Every random decision in the crate draws from a
//! `ChaCha8Rng` derived from the run seed and a fixed stream id, so results
//! never depend on the order in which unrelated components consume randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the independent consumers of a training run.
pub mod stream {
    pub const SEGMENT_PLAN: u64 = 1;
    pub const DROPOUT: u64 = 2;
    pub const SYNTH: u64 = 3;

    const INIT_BASE: u64 = 1 << 40;

    /// Initialization stream of LSTM slot `slot` owned by `owner` (a language
    /// index; shared layers use owner 0).
    pub fn layer_init(slot: usize, owner: usize) -> u64 {
        INIT_BASE | ((slot as u64) << 20) | owner as u64
    }

    pub fn embedding_init(language: usize) -> u64 {
        INIT_BASE | (0xF << 20) | language as u64
    }
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
