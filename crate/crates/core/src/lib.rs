//! Constant-memory training of recurrent convolutional cells.
//!
//! The crate bundles a small reverse-mode differentiation tape over dense
//! `f64` tensors, two recurrent convolutional cells (hGRU and convLSTM),
//! fixed-point forward dynamics with four gradient algorithms (BPTT, TBPTT,
//! RBP via a Neumann-series adjoint, and C-RBP which adds a Lipschitz
//! coefficient penalty), a deterministic contour-tracing data generator, and
//! a training/evaluation harness with state-space and memory diagnostics.

pub mod cells;
pub mod equilibrium;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod pathfinder;
pub mod tape;
pub mod tensor;

pub use tape::{Graph, Meter, NodeId, PointwiseFn, TapeError};
pub use tensor::{Kernel, Shape, Tensor, TensorError};

// Re-exported so downstream binaries share one thread-pool and RNG stack.
pub use rayon;

/// Deterministic RNG used across the crate.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
