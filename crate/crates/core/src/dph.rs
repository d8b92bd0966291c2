//! Univariate discrete phase-type distributions.
//!
//! `DPH(alpha, P)` is the absorption step of a terminating chain started from
//! `alpha` that moves according to the sub-stochastic matrix `P`; from state
//! `i` it is absorbed with probability `(1 - P 1)_i`.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

/// Upper bound on the number of steps walked when searching for a truncation level.
pub const MAX_TRUNCATION: u64 = 50_000_000;

pub(crate) fn validate_probability_vector(v: &Vector, what: &str) -> Result<Vector> {
    if let Some(bad) = v
        .iter()
        .find(|&&x| !x.is_finite() || x < -linalg::NEG_CLAMP)
    {
        return Err(Error::InvalidParameters(format!(
            "{what} has invalid entry {bad}"
        )));
    }
    let v = v.map(|x| x.max(0.0));
    let total = v.sum();
    if (total - 1.0).abs() > linalg::ROW_SUM_TOL {
        return Err(Error::InvalidParameters(format!(
            "{what} sums to {total}, expected 1"
        )));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DphParams {
    alpha: Vector,
    p: Matrix,
    exit: Vector,
}

impl DphParams {
    /// Validates and builds a representation. The initial vector must carry
    /// full mass; point masses at zero are not supported.
    pub fn new(alpha: Vector, p: Matrix) -> Result<Self> {
        if p.nrows() != p.ncols() {
            return Err(Error::NonSquare {
                rows: p.nrows(),
                cols: p.ncols(),
            });
        }
        if alpha.len() != p.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "alpha has length {} but P is {}x{}",
                alpha.len(),
                p.nrows(),
                p.ncols()
            )));
        }
        let alpha = validate_probability_vector(&alpha, "alpha")?;
        let p = linalg::clamp_nonnegative(&p, "P")?;
        let report = linalg::validate_substochastic(&p, false);
        if !report.is_valid() {
            return Err(Error::InvalidParameters(format!(
                "P: {}",
                report.describe()
            )));
        }
        let exit = linalg::exit_vector(&p).map(|x| x.max(0.0));
        Ok(Self { alpha, p, exit })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self) -> &Vector {
        &self.alpha
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    /// One-step absorption probabilities `1 - P 1`.
    pub fn exit(&self) -> &Vector {
        &self.exit
    }

    pub fn pmf(&self, ell: u64) -> Result<f64> {
        if ell < 1 {
            return Err(Error::OutOfRange("pmf argument must be >= 1".into()));
        }
        let power = u32::try_from(ell - 1)
            .map_err(|_| Error::OutOfRange(format!("pmf argument {ell} too large")))?;
        let row = self.alpha.transpose() * linalg::mat_power(&self.p, power)?;
        Ok((row * &self.exit)[(0, 0)].clamp(0.0, 1.0))
    }

    /// `[f(1), ..., f(len)]`, built by forward recursion.
    pub fn pmf_table(&self, len: usize) -> Vec<f64> {
        let pt = self.p.transpose();
        let mut state = self.alpha.clone();
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(state.dot(&self.exit).max(0.0));
            state = &pt * state;
        }
        out
    }

    /// `P(tau > ell) = alpha P^ell 1`.
    pub fn tail_mass(&self, ell: u64) -> Result<f64> {
        let power = u32::try_from(ell)
            .map_err(|_| Error::OutOfRange(format!("tail argument {ell} too large")))?;
        let row = self.alpha.transpose() * linalg::mat_power(&self.p, power)?;
        Ok(row.sum().max(0.0))
    }

    pub fn cdf(&self, ell: u64) -> Result<f64> {
        Ok(1.0 - self.tail_mass(ell)?)
    }

    /// Smallest `L` with `P(tau > L) < tol`.
    pub fn truncation_level(&self, tol: f64) -> Result<u64> {
        let pt = self.p.transpose();
        let mut state = self.alpha.clone();
        let mut level = 0;
        while state.sum() >= tol {
            state = &pt * state;
            level += 1;
            if level > MAX_TRUNCATION {
                return Err(Error::Numeric(format!(
                    "tail mass still above {tol} after {MAX_TRUNCATION} steps"
                )));
            }
        }
        Ok(level)
    }

    /// `E[x^tau] = x alpha (I - xP)^{-1} (1 - P1)`.
    pub fn pgf(&self, x: f64) -> Result<f64> {
        let w = linalg::resolvent_apply(&self.p, x, &self.exit)?;
        Ok(x * self.alpha.dot(&w))
    }

    /// `E[tau (tau - 1) ... (tau - n + 1)] = n! alpha P^{n-1} (I - P)^{-n-1} (1 - P1)`.
    pub fn factorial_moment(&self, n: u32) -> Result<f64> {
        if n == 0 {
            return Err(Error::OutOfRange(
                "factorial moment order must be >= 1".into(),
            ));
        }
        let d = self.dim();
        let inv = linalg::inverse(&(Matrix::identity(d, d) - &self.p))?;
        let mut v = self.exit.clone();
        for _ in 0..=n {
            v = &inv * v;
        }
        let v = linalg::mat_power(&self.p, n - 1)? * v;
        Ok(factorial(n) * self.alpha.dot(&v))
    }

    pub fn mean(&self) -> Result<f64> {
        self.factorial_moment(1)
    }

    pub fn sampler(&self) -> Result<DphSampler> {
        DphSampler::new(self)
    }

    /// Draws one absorption time. Builds a sampler on every call; use
    /// [`DphParams::sampler`] for repeated draws.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<u64> {
        Ok(self.sampler()?.sample(rng))
    }
}

pub(crate) fn factorial(n: u32) -> f64 {
    (1..=n).map(f64::from).product()
}

pub(crate) fn categorical(weights: impl IntoIterator<Item = f64>) -> Result<WeightedIndex<f64>> {
    let weights: Vec<f64> = weights.into_iter().map(|w| w.max(0.0)).collect();
    WeightedIndex::new(weights).map_err(|e| Error::InvalidParameters(e.to_string()))
}

/// Inverse-cdf sampler over the chain augmented with a cemetery state.
#[derive(Debug, Clone)]
pub struct DphSampler {
    start: WeightedIndex<f64>,
    /// Row `i` draws the next state; index `dim` is absorption.
    rows: Vec<WeightedIndex<f64>>,
    dim: usize,
}

impl DphSampler {
    pub fn new(params: &DphParams) -> Result<Self> {
        let dim = params.dim();
        let start = categorical(params.alpha.iter().copied())?;
        let rows = (0..dim)
            .map(|i| {
                categorical(
                    params
                        .p
                        .row(i)
                        .iter()
                        .copied()
                        .chain(std::iter::once(params.exit[i])),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { start, rows, dim })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        let mut state = self.start.sample(rng);
        let mut steps = 1;
        loop {
            let next = self.rows[state].sample(rng);
            if next == self.dim {
                return steps;
            }
            state = next;
            steps += 1;
        }
    }
}
