//! Seed derivation and small sampling helpers shared by the engines.
//!
//! Every stochastic component takes an explicit RNG. Independent streams
//! (replications, chains, engines) get seeds derived by hashing a parent
//! seed with a stream tag, so results do not depend on execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Child seed for stream `tag` of `parent`.
pub fn derive_seed(parent: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ splitmix64(tag.wrapping_mul(0xD1B5_4A32_D192_ED03)))
}

pub fn rng_from_seed(seed: u64) -> SimRng {
    SimRng::seed_from_u64(seed)
}

/// Index drawn with probability proportional to `weights` (nonnegative,
/// positive total).
pub fn sample_weighted<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0 && total.is_finite());
    let mut u = rng.random::<f64>() * total;
    let mut last_positive = 0;
    for (k, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if u < w {
                return k;
            }
            u -= w;
            last_positive = k;
        }
    }
    // rounding pushed u past the final bin
    last_positive
}

/// Draw from Dirichlet(alpha) by normalizing independent gammas.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive Dirichlet parameter").sample(rng))
        .collect();
    normalize_or_argmax(&mut draws, alpha);
    draws
}

/// Dirichlet(1, ..., 1) weights of length `n`, i.e. Bayesian bootstrap
/// weights.
pub fn sample_flat_dirichlet<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    for w in &mut draws {
        *w /= total;
    }
    draws
}

// Gamma draws with tiny shape can all underflow to zero; fall back to the
// component with the largest parameter.
fn normalize_or_argmax(draws: &mut [f64], alpha: &[f64]) {
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        for d in draws.iter_mut() {
            *d /= total;
        }
    } else {
        let best = alpha
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        for (k, d) in draws.iter_mut().enumerate() {
            *d = if k == best { 1.0 } else { 0.0 };
        }
    }
}
