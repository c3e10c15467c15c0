//! Hybrid quantum-classical binary image segmentation at desk scale.
//!
//! The crate simulates a small re-uploading variational quantum circuit as a
//! differentiable gate inside an encoder-decoder segmentation network. Feature
//! streams are compressed to a handful of rotation angles, run through the
//! circuit on an exact statevector simulator, and the measured Pauli-Z
//! expectations drive a per-channel convex combination (FPN merge) or a
//! multiplicative skip gate (U-Net). Everything trains end to end through a
//! minimal reverse-mode autodiff engine with parameter-shift gradients on the
//! quantum side.
//!
//! Module map:
//! - [`qsim`]: dense statevector simulation and parameter-shift gradients
//! - [`tensorgraph`]: reverse-mode autodiff over dense `f64` arrays
//! - [`losses`]: BCE, soft Dice, and Lovász hinge with the staged curriculum
//! - [`fusion`]: the quantum FPN gate, quantum skip gate, and classical merge
//! - [`segnet`]: toy encoder-decoder assembly with pluggable merge operators
//! - [`dataio`]: corpus ingestion, RLE codec, folds, synthetic data
//! - [`metrics`]: IoU, the ten-threshold competition metric, threshold search
//! - [`trainer`]: the two-stage training loop and gradient diagnostics

pub mod dataio;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod oracles;
pub mod qsim;
pub mod segnet;
pub mod tensorgraph;
pub mod trainer;

mod hashutil;
mod initialize;

pub use hashutil::fnv1a64;
