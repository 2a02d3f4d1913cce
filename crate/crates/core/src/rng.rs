//! Counter-addressed standard normal variates.
//!
//! Each variate is a pure function of `(seed, draw, component)`: the ChaCha8
//! stream is selected by `draw` and positioned at `component`, so results do
//! not depend on evaluation order or threading. Normals use the cosine branch
//! of the Box–Muller transform on two consecutive 64-bit words.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS_PER_VARIATE: u128 = 4;

fn unit_open_closed(x: u64) -> f64 {
    // (0, 1]: never zero, so the logarithm below is finite
    ((x >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn unit_closed_open(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn standard_normal(seed: u64, draw: u64, component: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    rng.set_word_pos(WORDS_PER_VARIATE * component as u128);
    box_muller(&mut rng)
}

/// Components `0..count` of draw `draw`.
pub fn standard_normals(seed: u64, draw: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw);
    (0..count).map(|_| box_muller(&mut rng)).collect()
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = unit_open_closed(rng.next_u64());
    let u2 = unit_closed_open(rng.next_u64());
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
