//! Seeded random streams and small sampling helpers shared by every stage.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type StageRng = ChaCha8Rng;

/// Independent, reproducible stream `stream` under a master `seed`.
///
/// Streams never overlap, so work keyed by stream id can be generated in any
/// order (or concurrently) and still produce identical output.
pub fn stream(seed: u64, stream: u64) -> StageRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Combine a namespace tag with an index into a stream id.
pub fn stream_id(namespace: u32, index: u64) -> u64 {
    ((namespace as u64) << 40) ^ index
}

/// Sample an index from unnormalized log-weights.
pub fn sample_logits<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    debug_assert!(!logits.is_empty());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    sample_weights(&weights, rng)
}

/// Sample an index proportional to nonnegative `weights`.
pub fn sample_weights<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.random_range(0..weights.len());
    }
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    // Rounding can leave `u` marginally above the last bucket.
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Draw `k` distinct indices, each draw proportional to the remaining weights.
pub fn sample_without_replacement<R: Rng + ?Sized>(weights: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut w = weights.to_vec();
    let mut picked = Vec::with_capacity(k.min(w.len()));
    for _ in 0..k.min(w.len()) {
        let i = sample_weights(&w, rng);
        picked.push(i);
        w[i] = 0.0;
    }
    picked
}
