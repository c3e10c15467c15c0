//! Seeded parameter initialization.
//!
//! Each tensor draws from its own ChaCha stream keyed by (run seed, fold,
//! parameter name), so the initial values of a parameter depend only on its
//! name — adding or removing other parameters (e.g. the quantum gates in the
//! classical ablation) cannot shift the shared weights.

use crate::hashutil::derive_seed;
use crate::tensorgraph::Node;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) fn init_rng(seed: u64, fold: usize, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &["init", &fold.to_string(), name]))
}

/// Leaf with entries uniform in ±bound.
pub(crate) fn uniform_leaf(shape: Vec<usize>, bound: f64, seed: u64, fold: usize, name: &str) -> Node {
    let mut rng = init_rng(seed, fold, name);
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Node::leaf(shape, values)
}

/// Leaf with entries uniform in ±1/√fan_in.
pub(crate) fn fan_in_leaf(shape: Vec<usize>, fan_in: usize, seed: u64, fold: usize, name: &str) -> Node {
    uniform_leaf(shape, 1.0 / (fan_in as f64).sqrt(), seed, fold, name)
}
