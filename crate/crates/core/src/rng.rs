//! Deterministic random streams.
//!
//! Every consumer of randomness gets its own ChaCha8 stream derived from the
//! master seed, a role and an index (block number or trial number), so a run
//! is reproducible and independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum StreamRole {
    /// Alice's setting choices (intensity, basis, bit).
    AliceSettings = 1,
    /// Bob's basis choices.
    BobSettings = 2,
    /// Photon numbers, channel transmission, dark counts and double-click ties.
    Physics = 3,
    /// Hash seeds drawn by Alice during key generation.
    AliceHash = 4,
    /// Monte-Carlo trial streams of the oracle lab.
    Trial = 5,
    /// Counterfactual phase-error draws used only for validation.
    Counterfactual = 6,
}

/// Stream for `(role, index)` under `master`.
pub fn stream(master: u64, role: StreamRole, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((role as u64) << 56) ^ (index & 0x00ff_ffff_ffff_ffff));
    rng
}
