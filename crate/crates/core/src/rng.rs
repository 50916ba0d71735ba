//! Seeded random streams.
//!
//! Every chain owns a ChaCha20 stream selected by its index, so results do
//! not depend on how chains are scheduled across worker threads.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Identifier recorded in run metadata.
pub const RNG_ALGORITHM: &str = "ChaCha20 (rand_chacha 0.9); seed_from_u64(master_seed), stream = chain index";

pub type LabRng = ChaCha20Rng;

/// Generator seeded from a single `u64`.
pub fn seeded(seed: u64) -> LabRng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Independent stream for chain `index` under `master_seed`.
pub fn chain_stream(master_seed: u64, index: u64) -> LabRng {
    let mut rng = ChaCha20Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn normal_scalar<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
