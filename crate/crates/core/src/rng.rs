//! Seeded random streams and the small set of discrete samplers shared by the
//! simulators.
//!
//! Every replica owns a ChaCha8 generator keyed by the master seed with the
//! replica index as its stream id, so any replica can be replayed on its own
//! and replica batches are independent of scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

pub type ReplicaRng = ChaCha8Rng;

/// Generator for replica `replica` of a campaign seeded with `master_seed`.
pub fn replica_rng(master_seed: u64, replica: u64) -> ReplicaRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replica);
    rng
}

/// Derives an independent sub-seed for a named campaign component, so that
/// e.g. the coupled and direct runs of one experiment never share streams.
pub fn derive_seed(master_seed: u64, label: &str) -> u64 {
    // FNV-1a over the label, mixed with the master seed (splitmix64 finaliser).
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = master_seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// `Binomial(n, p)` draw; degenerate parameters short-circuit without
/// consuming randomness.
pub fn binomial<R: Rng + ?Sized>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    Binomial::new(n, p).expect("valid binomial parameters").sample(rng)
}

/// Splits `n` items uniformly over `out.len()` cells by sequential
/// conditional binomials.
pub fn multinomial_uniform<R: Rng + ?Sized>(rng: &mut R, n: u64, out: &mut [u64]) {
    let k = out.len();
    let mut left = n;
    for (i, cell) in out.iter_mut().enumerate() {
        let remaining_cells = (k - i) as f64;
        let take = if i + 1 == k {
            left
        } else {
            binomial(rng, left, 1.0 / remaining_cells)
        };
        *cell = take;
        left -= take;
    }
}
