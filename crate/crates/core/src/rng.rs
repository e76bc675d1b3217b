//! Counter-based random streams.
//!
//! Every random draw in a simulation is addressed by a key
//! `(seed, domain, round, client, step)`. The key is hashed into a SplitMix64
//! state, so a stream can be reconstructed from its key alone and two
//! streams never depend on the order in which they are consumed. This is
//! what makes parallel client updates reproducible bit for bit.

use rand::RngCore;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Independent families of streams. Two domains never share a key even when
/// the remaining coordinates coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Domain {
    Participation = 1,
    GradientNoise = 2,
    Population = 3,
    Objective = 4,
    Dataset = 5,
    Minibatch = 6,
    Auxiliary = 7,
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hashes a stream key into a 64-bit state.
#[inline]
pub fn stream_key(seed: u64, domain: Domain, round: u64, client: u64, step: u64) -> u64 {
    let mut h = mix64(seed ^ GOLDEN_GAMMA);
    for word in [domain as u64, round, client, step] {
        h = mix64(h.wrapping_add(GOLDEN_GAMMA) ^ mix64(word.wrapping_add(0x6A09_E667_F3BC_C909)));
    }
    h
}

/// SplitMix64 stream positioned at the start of a keyed sequence.
#[derive(Clone, Debug)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn keyed(seed: u64, domain: Domain, round: u64, client: u64, step: u64) -> Self {
        Self {
            key: stream_key(seed, domain, round, client, step),
            counter: 0,
        }
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
