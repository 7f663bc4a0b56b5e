//! Seeded RNG streams.
//!
//! Every random draw in the crate flows through a named ChaCha8 stream so
//! that layouts, parameter init, batch order, and sampling noise are all
//! reproducible bit-for-bit from a single run seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a, used to fold stream names into seeds. Stable across platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A ChaCha8 stream derived from (seed, name). Draws from one stream never
/// perturb another, so adding a consumer does not reshuffle existing ones.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()))
}

/// Stream further keyed by an index (per-episode, per-step, ...).
pub fn stream_n(seed: u64, name: &str, n: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()) ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

/// Standard normal via Box-Muller. Consumes exactly two uniforms per pair.
pub fn fill_normal(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    let mut i = 0;
    while i < out.len() {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out[i] = r * theta.cos();
        if i + 1 < out.len() {
            out[i + 1] = r * theta.sin();
        }
        i += 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_deterministic_and_independent() {
        let mut a1 = stream(7, "layout");
        let mut a2 = stream(7, "layout");
        let mut b = stream(7, "noise");
        let xs1: Vec<u32> = (0..8).map(|_| a1.gen()).collect();
        let xs2: Vec<u32> = (0..8).map(|_| a2.gen()).collect();
        let ys: Vec<u32> = (0..8).map(|_| b.gen()).collect();
        assert_eq!(xs1, xs2);
        assert_ne!(xs1, ys);
    }

    #[test]
    fn normal_draws_have_sane_moments() {
        let mut rng = stream(1, "normal");
        let mut buf = vec![0.0; 20000];
        fill_normal(&mut rng, &mut buf);
        let mean = buf.iter().sum::<f64>() / buf.len() as f64;
        let var = buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / buf.len() as f64;
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn fnv_matches_reference_vector() {
        // Reference value for "a" from the FNV-1a specification.
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
