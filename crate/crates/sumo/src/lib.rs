//! Subspace-aware moment orthogonalization (SUMO) with Muon and low-rank
//! momentum baselines, spectral diagnostics, toy training models and
//! post-hoc adapter extraction.

pub mod adapter;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod io;
pub mod linalg;
pub mod optimizer;

pub use error::{Error, Result};
pub use linalg::Matrix;

/// Mixes a base seed with two stream coordinates (splitmix64 finalizer).
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
