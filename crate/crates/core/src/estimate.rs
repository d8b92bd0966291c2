//! Maximum-likelihood fitting of CDPH parameters to bivariate counts.
//!
//! The complete-data likelihood is multinomial in the path statistics, so the
//! M-step is a set of row-wise ratios. The E-step needs the conditional
//! expectations of those statistics given only the absorption pair; they are
//! computed per distinct observation with forward and backward vectors over
//! the shared and the independent phases.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdph::{exit_profile, CdphParams, CdphPath, Shift};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

/// Expected visit mass below which an M-step row keeps its previous value.
pub const FROZEN_ROW_MASS: f64 = 1e-12;
/// Consecutive small likelihood changes required before stopping early.
const EARLY_STOP_RUN: usize = 10;

/// One distinct absorption pair with its multiplicity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightedPair {
    pub n1: u64,
    pub n2: u64,
    pub weight: u64,
}

/// Bivariate counts stored on the absorption scale `tau >= 2`, aggregated
/// by distinct pair. The shift records how they were observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDataset {
    pairs: Vec<WeightedPair>,
    shift: Shift,
}

impl CountDataset {
    /// From absorption steps with multiplicities; repeated pairs are merged.
    pub fn from_tau_counts(
        counts: impl IntoIterator<Item = (u64, u64, u64)>,
        shift: Shift,
    ) -> Result<Self> {
        shift.validate()?;
        let mut merged: BTreeMap<(u64, u64), u64> = BTreeMap::new();
        for (n1, n2, w) in counts {
            if n1 < 2 || n2 < 2 {
                return Err(Error::InvalidData(format!(
                    "absorption pair ({n1}, {n2}) has a coordinate below 2"
                )));
            }
            if w == 0 {
                continue;
            }
            *merged.entry((n1, n2)).or_default() += w;
        }
        if merged.is_empty() {
            return Err(Error::InvalidData("dataset has no observations".into()));
        }
        let pairs = merged
            .into_iter()
            .map(|((n1, n2), weight)| WeightedPair { n1, n2, weight })
            .collect();
        Ok(Self { pairs, shift })
    }

    /// From observed values on the shifted lattice, one row per observation.
    pub fn from_observed(
        values: impl IntoIterator<Item = (f64, f64)>,
        shift: Shift,
    ) -> Result<Self> {
        Self::from_observed_weighted(values.into_iter().map(|(a, b)| (a, b, 1)), shift)
    }

    /// From observed values with frequencies.
    pub fn from_observed_weighted(
        values: impl IntoIterator<Item = (f64, f64, u64)>,
        shift: Shift,
    ) -> Result<Self> {
        let taus = values
            .into_iter()
            .map(|(x1, x2, w)| Ok((shift.to_tau(x1, 1)?, shift.to_tau(x2, 2)?, w)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tau_counts(taus, shift)
    }

    pub fn pairs(&self) -> &[WeightedPair] {
        &self.pairs
    }

    pub fn shift(&self) -> Shift {
        self.shift
    }

    /// Number of observations `n`, counting multiplicities.
    pub fn total_weight(&self) -> u64 {
        self.pairs.iter().map(|p| p.weight).sum()
    }

    /// Largest absorption step per coordinate.
    pub fn max_tau(&self) -> (u64, u64) {
        self.pairs
            .iter()
            .fold((2, 2), |(a, b), p| (a.max(p.n1), b.max(p.n2)))
    }

    fn check_lattice(&self, params: &CdphParams) -> Result<()> {
        if params.shift() != self.shift {
            return Err(Error::InvalidData(format!(
                "data observed with shift {:?} but the model uses {:?}",
                self.shift,
                params.shift()
            )));
        }
        Ok(())
    }
}

/// Path statistics: starts `a`, jumps within `E` (`na`), jumps `E -> S`
/// (`nt`), jumps within `S` per coordinate (`nb`) and absorptions (`nb_exit`).
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    pub a: Vector,
    pub na: Matrix,
    pub nt: Matrix,
    pub nb: [Matrix; 2],
    pub nb_exit: [Vector; 2],
}

impl SufficientStats {
    pub fn zeros(e_dim: usize, s_dim: usize) -> Self {
        Self {
            a: Vector::zeros(e_dim),
            na: Matrix::zeros(e_dim, e_dim),
            nt: Matrix::zeros(e_dim, s_dim),
            nb: [Matrix::zeros(s_dim, s_dim), Matrix::zeros(s_dim, s_dim)],
            nb_exit: [Vector::zeros(s_dim), Vector::zeros(s_dim)],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.a.len(), self.nt.ncols())
    }

    /// Counts of one fully observed path.
    pub fn from_path(path: &CdphPath, e_dim: usize, s_dim: usize) -> Self {
        let mut stats = Self::zeros(e_dim, s_dim);
        stats.add_path(path);
        stats
    }

    pub fn add_path(&mut self, path: &CdphPath) {
        let (first, last) = match (path.e_states.first(), path.e_states.last()) {
            (Some(&f), Some(&l)) => (f, l),
            _ => return,
        };
        self.a[first] += 1.0;
        for w in path.e_states.windows(2) {
            self.na[(w[0], w[1])] += 1.0;
        }
        if let Some(&entry) = path.s1.first() {
            self.nt[(last, entry)] += 1.0;
        }
        for (k, states) in [&path.s1, &path.s2].into_iter().enumerate() {
            for w in states.windows(2) {
                self.nb[k][(w[0], w[1])] += 1.0;
            }
            if let Some(&end) = states.last() {
                self.nb_exit[k][end] += 1.0;
            }
        }
    }

    /// `self += weight * other`.
    pub fn accumulate(&mut self, other: &Self, weight: f64) {
        self.a.axpy(weight, &other.a, 1.0);
        self.na += &other.na * weight;
        self.nt += &other.nt * weight;
        for k in 0..2 {
            self.nb[k] += &other.nb[k] * weight;
            self.nb_exit[k].axpy(weight, &other.nb_exit[k], 1.0);
        }
    }

    /// Total number of paths, `sum_i A_i`.
    pub fn total_starts(&self) -> f64 {
        self.a.sum()
    }

    pub fn is_finite_nonnegative(&self) -> bool {
        let ok = |x: &f64| x.is_finite() && *x >= 0.0;
        self.a.iter().all(ok)
            && self.na.iter().all(ok)
            && self.nt.iter().all(ok)
            && self.nb.iter().all(|m| m.iter().all(ok))
            && self.nb_exit.iter().all(|v| v.iter().all(ok))
    }
}

/// `sum_m w_m log f(n1_m, n2_m)`; `-inf` when some observation has zero
/// probability.
pub fn log_likelihood(params: &CdphParams, data: &CountDataset) -> Result<f64> {
    data.check_lattice(params)?;
    let terms: Vec<f64> = data
        .pairs
        .par_iter()
        .map(|p| p.weight as f64 * params.joint_pmf(p.n1, p.n2).ln())
        .collect();
    Ok(terms.into_iter().sum())
}

/// Conditional expectations for a single observation, unweighted, together
/// with its probability.
fn observation_stats(params: &CdphParams, n1: u64, n2: u64) -> Result<(SufficientStats, f64)> {
    let (e_dim, s_dim) = params.dims();
    let p = params.p();
    let u = params.u();
    let shared = (n1.min(n2) - 1) as usize;

    // g[k][z - 1] = Q_k^{z-1} q_k
    let g = [
        exit_profile(params.q1(), params.q1_exit(), (n1 - 1) as usize),
        exit_profile(params.q2(), params.q2_exit(), (n2 - 1) as usize),
    ];
    let n = [n1 as usize, n2 as usize];
    // h[m - 1]: both chains, entered in S after a shared phase of length m,
    // absorb exactly at (n1, n2)
    let h: Vec<Vector> = (1..=shared)
        .map(|m| g[0][n[0] - m - 1].component_mul(&g[1][n[1] - m - 1]))
        .collect();

    // forward rows over E: fwd[t - 1] = alpha P^{t-1}
    let pt = p.transpose();
    let mut fwd = Vec::with_capacity(shared);
    let mut row = params.alpha().clone();
    for _ in 0..shared {
        let next = &pt * &row;
        fwd.push(std::mem::replace(&mut row, next));
    }
    // backward columns over E: bwd[t - 1] = P(absorb at (n1, n2) | in E at step t)
    let mut bwd = vec![Vector::zeros(e_dim); shared];
    for t in (1..=shared).rev() {
        let mut b = u * &h[t - 1];
        if t < shared {
            b += p * &bwd[t];
        }
        bwd[t - 1] = b;
    }
    let prob: f64 = params.alpha().dot(&bwd[0]);
    if !(prob > 0.0) || !prob.is_finite() {
        return Err(Error::ZeroProbability { n1, n2 });
    }

    let mut stats = SufficientStats::zeros(e_dim, s_dim);
    stats.a = params.alpha().component_mul(&bwd[0]);
    for t in 1..shared {
        stats.na += (&fwd[t - 1] * bwd[t].transpose()).component_mul(p);
    }
    // entry[m - 1] = alpha P^{m-1} U as a column over S
    let ut = u.transpose();
    let entry: Vec<Vector> = fwd.iter().map(|a| &ut * a).collect();
    for t in 1..=shared {
        stats.nt += (&fwd[t - 1] * h[t - 1].transpose()).component_mul(u);
    }

    for k in 0..2 {
        let other = 1 - k;
        let q = params.q(k + 1);
        let qt = q.transpose();
        let exit = params.q_exit(k + 1);
        let nk = n[k];
        // phi at absolute step t over S: weight of chain k sitting in each
        // state with the other chain already committed to absorb at its n
        let mut phi = Vector::zeros(s_dim);
        for t in 2..=nk {
            let mut next = &qt * &phi;
            if t - 1 <= shared {
                let m = t - 1;
                next += entry[m - 1].component_mul(&g[other][n[other] - m - 1]);
            }
            phi = next;
            if t < nk {
                stats.nb[k] += (&phi * g[k][nk - t - 1].transpose()).component_mul(q);
            } else {
                stats.nb_exit[k] += phi.component_mul(exit);
            }
        }
    }

    let scale = 1.0 / prob;
    let mut scaled = SufficientStats::zeros(e_dim, s_dim);
    scaled.accumulate(&stats, scale);
    Ok((scaled, prob))
}

/// Conditional expectations of the path statistics given the data, and the
/// log-likelihood at `params`.
pub fn e_step(params: &CdphParams, data: &CountDataset) -> Result<(SufficientStats, f64)> {
    data.check_lattice(params)?;
    let (e_dim, s_dim) = params.dims();
    // per-observation results are summed in data order so the output does
    // not depend on the thread count
    let parts = data
        .pairs
        .par_iter()
        .map(|p| observation_stats(params, p.n1, p.n2))
        .collect::<Result<Vec<_>>>()?;
    let mut total = SufficientStats::zeros(e_dim, s_dim);
    let mut loglik = 0.0;
    for (pair, (stats, prob)) in data.pairs.iter().zip(&parts) {
        let w = pair.weight as f64;
        total.accumulate(stats, w);
        loglik += w * prob.ln();
    }
    Ok((total, loglik))
}

/// Normalizes `counts` as one probability row; `None` when the row carries
/// no mass.
fn ratio_row(counts: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = counts.iter().sum();
    (total > FROZEN_ROW_MASS).then(|| counts.iter().map(|c| c / total).collect())
}

/// Ratio estimates from path statistics. Rows with no visits keep the values
/// of `previous`; without a previous model they are an error.
pub fn m_step(
    stats: &SufficientStats,
    previous: Option<&CdphParams>,
    shift: Shift,
) -> Result<CdphParams> {
    let (e_dim, s_dim) = stats.dims();
    if let Some(prev) = previous {
        if prev.dims() != (e_dim, s_dim) {
            return Err(Error::DimensionMismatch(format!(
                "statistics for {:?} but previous model has {:?}",
                (e_dim, s_dim),
                prev.dims()
            )));
        }
    }
    let n = stats.total_starts();
    if !(n > 0.0) {
        return Err(Error::InvalidData("no paths in the statistics".into()));
    }
    let alpha = &stats.a / n;
    let unvisited = |what: &str, i: usize| {
        Error::InvalidData(format!(
            "{what} row {i} has no visits and no previous value"
        ))
    };

    let mut p = Matrix::zeros(e_dim, e_dim);
    let mut u = Matrix::zeros(e_dim, s_dim);
    for i in 0..e_dim {
        let counts: Vec<f64> = stats
            .na
            .row(i)
            .iter()
            .chain(stats.nt.row(i).iter())
            .copied()
            .collect();
        match (ratio_row(&counts), previous) {
            (Some(row), _) => {
                for j in 0..e_dim {
                    p[(i, j)] = row[j];
                }
                for j in 0..s_dim {
                    u[(i, j)] = row[e_dim + j];
                }
            }
            (None, Some(prev)) => {
                p.set_row(i, &prev.p().row(i));
                u.set_row(i, &prev.u().row(i));
            }
            (None, None) => return Err(unvisited("(P U)", i)),
        }
    }

    let mut qs = [Matrix::zeros(s_dim, s_dim), Matrix::zeros(s_dim, s_dim)];
    for k in 0..2 {
        for i in 0..s_dim {
            let counts: Vec<f64> = stats.nb[k]
                .row(i)
                .iter()
                .copied()
                .chain(std::iter::once(stats.nb_exit[k][i]))
                .collect();
            match (ratio_row(&counts), previous) {
                (Some(row), _) => {
                    for j in 0..s_dim {
                        qs[k][(i, j)] = row[j];
                    }
                }
                (None, Some(prev)) => qs[k].set_row(i, &prev.q(k + 1).row(i)),
                (None, None) => return Err(unvisited(if k == 0 { "Q1" } else { "Q2" }, i)),
            }
        }
    }
    let [q1, q2] = qs;
    CdphParams::new(alpha, p, u, q1, q2)?.with_shift(shift)
}

/// Maximum-likelihood estimate from fully observed path statistics.
pub fn mle_fully_observed(stats: &SufficientStats, shift: Shift) -> Result<CdphParams> {
    m_step(stats, None, shift)
}

/// How starting parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// Independent uniforms normalized row by row.
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the likelihood moves less than this for ten consecutive
    /// iterations; zero runs the full budget.
    pub log_lik_tol: f64,
    pub seed: u64,
    pub e_dim: usize,
    pub s_dim: usize,
    pub init_scheme: InitScheme,
    /// Fresh draws allowed when a starting point gives some observation
    /// zero probability.
    pub max_init_retries: usize,
}

impl EmConfig {
    pub fn new(e_dim: usize, s_dim: usize, seed: u64) -> Self {
        Self {
            max_iters: 500,
            log_lik_tol: 0.0,
            seed,
            e_dim,
            s_dim,
            init_scheme: InitScheme::Uniform,
            max_init_retries: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameters(
                "max_iters must be at least 1".into(),
            ));
        }
        if self.e_dim == 0 || self.s_dim == 0 {
            return Err(Error::InvalidParameters(
                "dimensions must be at least (1, 1)".into(),
            ));
        }
        if !(self.log_lik_tol >= 0.0) {
            return Err(Error::InvalidParameters(
                "log_lik_tol must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Result of an EM run.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub params: CdphParams,
    pub initial_log_lik: f64,
    /// Log-likelihood after each M-step.
    pub trace: Vec<f64>,
    /// Starting draws rejected before the run.
    pub init_retries: usize,
}

impl EmFit {
    pub fn log_lik(&self) -> f64 {
        self.trace.last().copied().unwrap_or(self.initial_log_lik)
    }
}

/// EM from random starting parameters drawn with `config.seed`.
pub fn em_fit(data: &CountDataset, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut retries = 0;
    loop {
        let start = match config.init_scheme {
            InitScheme::Uniform => CdphParams::random(config.e_dim, config.s_dim, &mut rng)?,
        }
        .with_shift(data.shift())?;
        match em_from(data, start, config) {
            Err(Error::ZeroProbability { .. }) if retries < config.max_init_retries => {
                retries += 1;
            }
            Ok(mut fit) => {
                fit.init_retries = retries;
                return Ok(fit);
            }
            Err(e) => return Err(e),
        }
    }
}

/// EM from the given starting parameters.
pub fn em_from(data: &CountDataset, start: CdphParams, config: &EmConfig) -> Result<EmFit> {
    config.validate()?;
    let (mut stats, initial_log_lik) = e_step(&start, data)?;
    let mut params = start;
    let mut trace = Vec::with_capacity(config.max_iters);
    let mut quiet = 0;
    let mut last = initial_log_lik;
    for _ in 0..config.max_iters {
        params = m_step(&stats, Some(&params), data.shift())?;
        let (next, ll) = e_step(&params, data)?;
        stats = next;
        trace.push(ll);
        if config.log_lik_tol > 0.0 {
            quiet = if (ll - last).abs() < config.log_lik_tol {
                quiet + 1
            } else {
                0
            };
            if quiet >= EARLY_STOP_RUN {
                break;
            }
        }
        last = ll;
    }
    Ok(EmFit {
        params,
        initial_log_lik,
        trace,
        init_retries: 0,
    })
}
