//! Deterministic random-number management.
//!
//! One root seed feeds several independent ChaCha8 streams, one per consumer.
//! Changing how many draws one protocol makes never shifts the draws seen by
//! another, so paired comparisons across protocols stay aligned.
//!
//! All integer draws go through `u32` ranges so results do not depend on the
//! platform's pointer width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Named substreams derived from a root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Spawn = 1,
    AlohaBackoff = 2,
    CsmaBackoff = 3,
    LmacSlots = 4,
    DesyncJitter = 5,
    TdmaAssign = 6,
}

pub fn stream(root_seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(which as u64);
    rng
}

/// Uniform integer in `lo..=hi`.
pub fn uniform_inclusive<R: Rng + ?Sized>(rng: &mut R, lo: u32, hi: u32) -> u32 {
    rng.gen_range(lo..=hi)
}

/// Uniform index in `0..len`. Panics if `len == 0`.
pub fn uniform_index<R: Rng + ?Sized>(rng: &mut R, len: usize) -> usize {
    let len = u32::try_from(len).expect("collection too large to sample");
    rng.gen_range(0..len) as usize
}

/// Fisher-Yates shuffle using `u32` draws.
pub fn shuffle<T, R: Rng + ?Sized>(rng: &mut R, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}
