//! Common-shock bivariate discrete phase-type (CDPH) distributions.
//!
//! Evaluation, simulation and closure constructions for pairs of absorption
//! times of two Markov chains that share an initial phase, compound sums
//! driven by such pairs, and EM fitting to bivariate count data.

pub mod cdph;
pub mod closures;
pub mod compound;
pub mod dph;
pub mod error;
pub mod estimate;
pub mod experiments;
pub mod linalg;

pub use cdph::{CdphDraw, CdphParams, CdphPath, CdphSampler, LatentTriple, PmfTable, Shift};
pub use closures::{build_coupled_chain, max_dph, min_dph, mixture, sum_dph, sum_of_vectors};
pub use compound::{LaplacePoint, LaplaceTransform, MphStarParams};
pub use dph::DphParams;
pub use error::{Error, Result};
pub use estimate::{em_fit, CountDataset, EmConfig, EmFit, SufficientStats};
pub use linalg::{Matrix, Vector};
