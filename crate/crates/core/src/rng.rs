//! Deterministic seed derivation.
//!
//! Every random draw in the crate comes from a [`SeedStream`] derived from the
//! master seed through a fixed path of labels, e.g. `master / step / task /
//! candidate`. Two streams with different paths are statistically
//! independent, and a stream never depends on the order in which its
//! siblings were consumed, which is what keeps parallel work reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Labels for the top-level derivation domains.
pub mod label {
    pub const TASK_CONTENT: u64 = 0x7461_736b;
    pub const TRAIN_BATCH: u64 = 0x6261_7463;
    pub const STEP: u64 = 0x7374_6570;
    pub const STUDENT: u64 = 0x7374_7564;
    pub const TEACHER_POOL: u64 = 0x706f_6f6c;
    pub const TIER2: u64 = 0x7469_6572;
    pub const EVAL: u64 = 0x6576_616c;
    pub const HELDOUT: u64 = 0x686f_6c64;
    pub const CATCH_RATE: u64 = 0x6361_7463;
    pub const RESAMPLE: u64 = 0x7265_736d;
    pub const PRETRAIN: u64 = 0x7072_6574;
    pub const NOISE: u64 = 0x6e6f_6973;
    pub const GRADCHECK: u64 = 0x6772_6164;
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A node in the seed derivation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedStream {
    key: u64,
}

impl SeedStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            key: splitmix64(master_seed),
        }
    }

    /// Derives the child stream for `label`.
    pub fn child(&self, label: u64) -> Self {
        Self {
            key: splitmix64(self.key ^ splitmix64(label.wrapping_mul(GOLDEN))),
        }
    }

    /// Convenience for a multi-level derivation.
    pub fn path(&self, labels: &[u64]) -> Self {
        labels.iter().fold(*self, |s, &l| s.child(l))
    }

    pub fn key(&self) -> u64 {
        self.key
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key)
    }
}
