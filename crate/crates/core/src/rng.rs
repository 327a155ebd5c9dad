//! Seeded generator streams.
//!
//! Every random draw in the crate comes from `ChaCha20` seeded with the run
//! seed and switched to a named stream. One stream per dataset draw, one per
//! minibatch source, and a disjoint range for Monte Carlo chunks and
//! verification trials. Two draws never share a stream, so adding a draw
//! never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub type LabRng = ChaCha20Rng;

pub const PREFERENCES: u64 = 1;
pub const REFERENCE: u64 = 2;
pub const PRETRAIN: u64 = 3;
pub const MINIBATCH_PREFERENCES: u64 = 10;
pub const MINIBATCH_REFERENCE: u64 = 11;
pub const MINIBATCH_PRETRAIN: u64 = 12;
/// Monte Carlo chunk `k` uses stream `MONTE_CARLO + k`.
pub const MONTE_CARLO: u64 = 1 << 32;
/// Verification trial `k` uses stream `TRIALS + k`.
pub const TRIALS: u64 = 1 << 40;

pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
