//! Shared fixtures for the benchmarks.

use cdph_core::experiments::{sample_biv_poisson, BivPoissonSpec};
use cdph_core::{CdphParams, CountDataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random parameters of the given size, fixed by `seed`.
pub fn model(e_dim: usize, s_dim: usize, seed: u64) -> CdphParams {
    CdphParams::random(e_dim, s_dim, &mut ChaCha8Rng::seed_from_u64(seed))
        .expect("valid dimensions")
}

/// `n` draws of the bivariate Poisson study with common-shock intensity 2.
pub fn poisson_data(n: usize, seed: u64) -> CountDataset {
    let spec = BivPoissonSpec::study(2.0).expect("study intensities are admissible");
    sample_biv_poisson(&spec, n, seed).expect("non-empty sample")
}
