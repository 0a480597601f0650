//! Counter-based random streams.
//!
//! Every stochastic consumer draws from its own ChaCha stream derived from a
//! single seed, so adding draws in one subsystem never shifts another.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stream {
    Views,
    Sgld,
    Relocation,
    Clone,
    Init,
    Synth,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Views => 1,
            Stream::Sgld => 2,
            Stream::Relocation => 3,
            Stream::Clone => 4,
            Stream::Init => 5,
            Stream::Synth => 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RngStreams {
    seed: u64,
    streams: BTreeMap<Stream, ChaCha8Rng>,
}

/// Serializable snapshot of [`RngStreams`]: the seed plus each stream's word position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Word positions as decimal strings (they are `u128`).
    pub positions: BTreeMap<Stream, String>,
}

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        Self { seed, streams: BTreeMap::new() }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&mut self, which: Stream) -> &mut ChaCha8Rng {
        let seed = self.seed;
        self.streams.entry(which).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(which.id());
            rng
        })
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            positions: self
                .streams
                .iter()
                .map(|(k, r)| (*k, r.get_word_pos().to_string()))
                .collect(),
        }
    }

    pub fn from_state(state: &RngState) -> Option<Self> {
        let mut out = Self::new(state.seed);
        for (k, pos) in &state.positions {
            let pos: u128 = pos.parse().ok()?;
            out.stream(*k).set_word_pos(pos);
        }
        Some(out)
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable seed derived from a global seed and a sequence of words.
pub fn derive_seed(global: u64, words: &[u64]) -> u64 {
    words.iter().fold(mix64(global), |acc, &w| mix64(acc ^ w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_independent() {
        let mut a = RngStreams::new(7);
        let mut b = RngStreams::new(7);
        let _: f64 = a.stream(Stream::Clone).random();
        let x: f64 = a.stream(Stream::Sgld).random();
        let y: f64 = b.stream(Stream::Sgld).random();
        assert_eq!(x, y);
    }

    #[test]
    fn state_restores_positions() {
        let mut a = RngStreams::new(11);
        for _ in 0..17 {
            let _: u32 = a.stream(Stream::Views).random();
        }
        let mut b = RngStreams::from_state(&a.state()).unwrap();
        let x: u64 = a.stream(Stream::Views).random();
        let y: u64 = b.stream(Stream::Views).random();
        assert_eq!(x, y);
    }
}
