//! Seeding discipline and numeric comparison helpers.
//!
//! Every stochastic operation in the crate draws from a ChaCha stream
//! derived from `(base_seed, purpose tags...)`, so any artifact is
//! reproducible from its config and seed alone, and parallel runs never
//! share generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Plain seeded generator.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for a named sub-stream of a base seed. Mixing is a
/// splitmix64 walk over the parts, so distinct tag tuples give
/// independent streams.
pub fn stream(base: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut state = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        state = splitmix64(state ^ splitmix64(p));
    }
    ChaCha8Rng::seed_from_u64(state)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Relative closeness with an absolute floor: true when
/// `|a - b| <= abs_floor` or `|a - b| / max(|a|, |b|) <= rel`.
pub fn rel_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
    let diff = (a - b).abs();
    if diff <= abs_floor {
        return true;
    }
    diff / a.abs().max(b.abs()) <= rel
}

/// Panic with context unless `|a - b| <= tol`.
pub fn assert_close(a: f64, b: f64, tol: f64) {
    assert!(
        (a - b).abs() <= tol,
        "expected {a} and {b} to agree within {tol}, diff {}",
        (a - b).abs()
    );
}
