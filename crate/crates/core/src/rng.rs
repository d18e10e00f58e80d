//! Counter-based random streams.
//!
//! A draw is addressed by `(root seed, purpose, sample, layer, unit)` and the
//! position within that unit's window. The ChaCha key comes from the root
//! seed, the 64-bit stream id packs `(sample, layer, purpose)`, and each unit
//! owns a disjoint window of 2^32 words in the keystream. The values a unit
//! sees are therefore independent of the order in which units, layers or
//! samples are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const UNIT_WINDOW_BITS: u32 = 32;
const MAX_LAYER: u64 = 1 << 12;
const MAX_SAMPLE: u64 = 1 << 48;

/// What the draws are used for; keeps independent consumers apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Network = 1,
    GaussianProcess = 2,
    Bootstrap = 3,
    Oracle = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamRoot {
    seed: u64,
}

impl StreamRoot {
    pub fn new(seed: u64) -> Self {
        StreamRoot { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Generator positioned at the start of `(purpose, sample, layer, unit)`.
    pub fn unit_rng(&self, purpose: Purpose, sample: u64, layer: u64, unit: u64) -> ChaCha8Rng {
        assert!(sample < MAX_SAMPLE, "sample index {sample} exceeds stream capacity");
        assert!(layer < MAX_LAYER, "layer index {layer} exceeds stream capacity");
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream((sample << 16) | (layer << 4) | purpose as u64);
        rng.set_word_pos(u128::from(unit) << UNIT_WINDOW_BITS);
        rng
    }
}

/// Fill `out` with iid N(0, 1) draws.
pub fn fill_standard_normal<R: rand::Rng>(rng: &mut R, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}
