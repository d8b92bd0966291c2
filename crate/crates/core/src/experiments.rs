//! Reference count generators and fit diagnostics for the simulation studies.
//!
//! Counts `N*` from the generators are fitted as `tau = N* + 2`, i.e. with
//! shift `(1, 0, 1, 0)` in the `N = c (tau - 2) + k` convention.

use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdph::{CdphParams, Shift};
use crate::error::{Error, Result};
use crate::estimate::{em_fit, CountDataset, EmConfig, EmFit};

/// Shift that maps `tau = N* + 2` back to `N*`.
pub const COUNT_SHIFT: Shift = Shift {
    c1: 1.0,
    k1: 0.0,
    c2: 1.0,
    k2: 0.0,
};

/// Dimensions `(|E|, |S|)` fitted in every study.
pub const STUDY_DIMS: [(usize, usize); 3] = [(2, 1), (3, 2), (4, 3)];
pub const STUDY_DRAWS: usize = 10_000;
pub const STUDY_ITERS: usize = 500;
/// Mass left outside the report window, per model.
pub const WINDOW_TAIL: f64 = 1e-6;

/// Generator streams; draws depend on the seed only, not on thread count.
const STREAMS: u64 = 32;

/// Source of i.i.d. count pairs `(N1*, N2*)`.
pub trait CountGenerator: Sync {
    fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (u64, u64);
}

fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    // rate checked positive and finite at construction
    Poisson::new(lambda)
        .map(|d| d.sample(rng) as u64)
        .unwrap_or(0)
}

fn check_rate(name: &str, x: f64, allow_zero: bool) -> Result<()> {
    let ok = x.is_finite() && if allow_zero { x >= 0.0 } else { x > 0.0 };
    if !ok {
        return Err(Error::InvalidParameters(format!(
            "{name} = {x} is not admissible"
        )));
    }
    Ok(())
}

/// `N_k* = V_k + Z` with independent Poisson `V1`, `V2`, `Z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BivPoissonSpec {
    pub lambda_v1: f64,
    pub lambda_v2: f64,
    pub lambda_z: f64,
}

impl BivPoissonSpec {
    /// Individual rates may be zero (pure common shock); the shock rate may not.
    pub fn new(lambda_v1: f64, lambda_v2: f64, lambda_z: f64) -> Result<Self> {
        check_rate("lambda_v1", lambda_v1, true)?;
        check_rate("lambda_v2", lambda_v2, true)?;
        check_rate("lambda_z", lambda_z, false)?;
        Ok(Self {
            lambda_v1,
            lambda_v2,
            lambda_z,
        })
    }

    /// From marginal intensities `lambda_Nk = lambda_Vk + lambda_Z`.
    pub fn from_marginals(lambda_n1: f64, lambda_n2: f64, lambda_z: f64) -> Result<Self> {
        Self::new(lambda_n1 - lambda_z, lambda_n2 - lambda_z, lambda_z)
    }

    /// Study configuration with marginal intensities (5, 4).
    pub fn study(lambda_z: f64) -> Result<Self> {
        Self::from_marginals(5.0, 4.0, lambda_z)
    }

    /// `sum_z P(Z = z) P(V1 = n1 - z) P(V2 = n2 - z)`.
    pub fn pmf(&self, n1: u64, n2: u64) -> f64 {
        (0..=n1.min(n2))
            .map(|z| {
                poisson_pmf(self.lambda_z, z)
                    * poisson_pmf(self.lambda_v1, n1 - z)
                    * poisson_pmf(self.lambda_v2, n2 - z)
            })
            .sum()
    }
}

fn poisson_pmf(lambda: f64, k: u64) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let log_fact: f64 = (1..=k).map(|i| (i as f64).ln()).sum();
    (k as f64 * lambda.ln() - lambda - log_fact).exp()
}

impl CountGenerator for BivPoissonSpec {
    fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (u64, u64) {
        let z = poisson_draw(self.lambda_z, rng);
        let v1 = poisson_draw(self.lambda_v1, rng);
        let v2 = poisson_draw(self.lambda_v2, rng);
        (v1 + z, v2 + z)
    }
}

/// Conditionally independent Poissons with means `rate_k L`, `L ~ Lindley(theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonLindleySpec {
    pub theta: f64,
    pub rate1: f64,
    pub rate2: f64,
}

impl PoissonLindleySpec {
    pub fn new(theta: f64, rate1: f64, rate2: f64) -> Result<Self> {
        check_rate("theta", theta, false)?;
        check_rate("rate1", rate1, false)?;
        check_rate("rate2", rate2, false)?;
        Ok(Self {
            theta,
            rate1,
            rate2,
        })
    }

    /// `theta = 2`, rates `(2, 3)`.
    pub fn study() -> Self {
        Self {
            theta: 2.0,
            rate1: 2.0,
            rate2: 3.0,
        }
    }

    /// `E[L] = (theta + 2) / (theta (theta + 1))`.
    pub fn lindley_mean(&self) -> f64 {
        (self.theta + 2.0) / (self.theta * (self.theta + 1.0))
    }

    /// `E[L^2] = 2 (theta + 3) / (theta^2 (theta + 1))`.
    pub fn lindley_second_moment(&self) -> f64 {
        2.0 * (self.theta + 3.0) / (self.theta * self.theta * (self.theta + 1.0))
    }

    /// Lindley draw: `Exp(theta)` with probability `theta / (theta + 1)`,
    /// otherwise `Gamma(2, theta)`.
    pub fn sample_lindley<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let exp_weight = self.theta / (self.theta + 1.0);
        if rng.random::<f64>() < exp_weight {
            Exp::new(self.theta).map(|d| d.sample(rng)).unwrap_or(0.0)
        } else {
            Gamma::new(2.0, 1.0 / self.theta)
                .map(|d| d.sample(rng))
                .unwrap_or(0.0)
        }
    }
}

impl CountGenerator for PoissonLindleySpec {
    fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (u64, u64) {
        let l = self.sample_lindley(rng);
        (
            poisson_draw(self.rate1 * l, rng),
            poisson_draw(self.rate2 * l, rng),
        )
    }
}

/// `n` draws split over fixed ChaCha streams of `seed`, concatenated in
/// stream order.
pub fn draw_counts<G: CountGenerator>(generator: &G, n: usize, seed: u64) -> Vec<(u64, u64)> {
    let n = n as u64;
    (0..STREAMS)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let len = n / STREAMS + u64::from(stream < n % STREAMS);
            (0..len)
                .map(|_| generator.sample_pair(&mut rng))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

/// Counts as a dataset on the `tau = N* + 2` scale.
pub fn counts_dataset(draws: &[(u64, u64)]) -> Result<CountDataset> {
    CountDataset::from_tau_counts(draws.iter().map(|&(a, b)| (a + 2, b + 2, 1)), COUNT_SHIFT)
}

pub fn sample_biv_poisson(spec: &BivPoissonSpec, n: usize, seed: u64) -> Result<CountDataset> {
    check_draws(n)?;
    counts_dataset(&draw_counts(spec, n, seed))
}

pub fn sample_poisson_lindley(
    spec: &PoissonLindleySpec,
    n: usize,
    seed: u64,
) -> Result<CountDataset> {
    check_draws(n)?;
    counts_dataset(&draw_counts(spec, n, seed))
}

fn check_draws(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::OutOfRange("need at least one draw".into()));
    }
    Ok(())
}

/// Relative frequencies on `[2, max1] x [2, max2]` (absorption scale).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalPmf {
    max1: u64,
    max2: u64,
    sample_size: u64,
    /// `values[(n1 - 2) * width + (n2 - 2)]`.
    values: Vec<f64>,
}

impl EmpiricalPmf {
    pub fn new(data: &CountDataset) -> Result<Self> {
        let sample_size = data.total_weight();
        if sample_size == 0 {
            return Err(Error::InvalidData("empty dataset".into()));
        }
        let (max1, max2) = data.max_tau();
        let width = (max2 - 1) as usize;
        let mut values = vec![0.0; (max1 - 1) as usize * width];
        for p in data.pairs() {
            values[(p.n1 - 2) as usize * width + (p.n2 - 2) as usize] +=
                p.weight as f64 / sample_size as f64;
        }
        Ok(Self {
            max1,
            max2,
            sample_size,
            values,
        })
    }

    pub fn max1(&self) -> u64 {
        self.max1
    }

    pub fn max2(&self) -> u64 {
        self.max2
    }

    pub fn sample_size(&self) -> u64 {
        self.sample_size
    }

    /// Zero outside the observed rectangle.
    pub fn get(&self, n1: u64, n2: u64) -> f64 {
        if n1 < 2 || n2 < 2 || n1 > self.max1 || n2 > self.max2 {
            return 0.0;
        }
        self.values[(n1 - 2) as usize * (self.max2 - 1) as usize + (n2 - 2) as usize]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Marginal frequencies of coordinate `k`, indexed by `tau - 2`.
    pub fn marginal(&self, k: usize) -> Vec<f64> {
        let (len, other) = if k == 1 {
            (self.max1, self.max2)
        } else {
            (self.max2, self.max1)
        };
        (2..=len)
            .map(|a| {
                (2..=other)
                    .map(|b| {
                        if k == 1 {
                            self.get(a, b)
                        } else {
                            self.get(b, a)
                        }
                    })
                    .sum()
            })
            .collect()
    }
}

/// One row of a marginal comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub tau: u64,
    /// Value on the observed lattice.
    pub observed: f64,
    pub empirical: f64,
    pub fitted: f64,
}

/// Fitted law of the common shock `tau12`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShockRow {
    pub tau12: u64,
    /// Shock size on the count scale, `c1 (tau12 - 1)`.
    pub shock: f64,
    pub fitted: f64,
}

/// One cell of the heatmap grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub tau1: u64,
    pub tau2: u64,
    pub x1: f64,
    pub x2: f64,
    pub empirical: f64,
    pub fitted: f64,
    pub abs_diff: f64,
}

/// Data behind one comparison figure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Window `[2, max1] x [2, max2]` on the absorption scale.
    pub window: (u64, u64),
    pub grid: Vec<GridCell>,
    pub marginals: [Vec<MarginalRow>; 2],
    pub common_shock: Vec<ShockRow>,
    pub fitted_mass_outside: f64,
    pub tv_distance: f64,
}

/// Half the `l1` distance, counting fitted mass outside the window in full.
pub fn tv_distance(empirical: &EmpiricalPmf, fitted: &CdphParams, window: (u64, u64)) -> f64 {
    let table = fitted.pmf_table(window.0, window.1);
    let mut diff = 0.0;
    for (n1, n2, f) in table.iter() {
        diff += (empirical.get(n1, n2) - f).abs();
    }
    let outside = (1.0 - table.total()).max(0.0);
    0.5 * (diff + outside)
}

pub fn fit_report(data: &CountDataset, fitted: &CdphParams) -> Result<FitReport> {
    if data.shift() != fitted.shift() {
        return Err(Error::InvalidData(
            "fitted model and data use different shifts".into(),
        ));
    }
    let empirical = EmpiricalPmf::new(data)?;
    // the two marginal tails each get half the budget
    let (l1, l2) = fitted.truncation(WINDOW_TAIL / 2.0)?;
    let window = (l1.max(empirical.max1()), l2.max(empirical.max2()));
    let shift = data.shift();
    let table = fitted.pmf_table(window.0, window.1);

    let mut grid = Vec::with_capacity(((window.0 - 1) * (window.1 - 1)) as usize);
    let mut diff = 0.0;
    for (n1, n2, f) in table.iter() {
        let e = empirical.get(n1, n2);
        diff += (e - f).abs();
        grid.push(GridCell {
            tau1: n1,
            tau2: n2,
            x1: shift.to_observed(n1, 1),
            x2: shift.to_observed(n2, 2),
            empirical: e,
            fitted: f,
            abs_diff: (e - f).abs(),
        });
    }
    let fitted_mass_outside = (1.0 - table.total()).max(0.0);

    let marginals = [1usize, 2].map(|k| {
        let len = if k == 1 { window.0 } else { window.1 };
        let emp = empirical.marginal(k);
        let fit = fitted
            .marginal(k)
            .map(|d| d.pmf_table(len as usize))
            .unwrap_or_default();
        (2..=len)
            .map(|tau| MarginalRow {
                tau,
                observed: shift.to_observed(tau, k),
                empirical: emp.get((tau - 2) as usize).copied().unwrap_or(0.0),
                fitted: fit.get((tau - 1) as usize).copied().unwrap_or(0.0),
            })
            .collect::<Vec<_>>()
    });

    let shock = fitted.common_shock()?;
    let shock_len = shock.truncation_level(WINDOW_TAIL)?.max(1);
    let common_shock = shock
        .pmf_table(shock_len as usize)
        .into_iter()
        .enumerate()
        .map(|(i, fitted)| ShockRow {
            tau12: i as u64 + 1,
            shock: shift.c1 * i as f64,
            fitted,
        })
        .collect();

    Ok(FitReport {
        window,
        grid,
        marginals,
        common_shock,
        fitted_mass_outside,
        tv_distance: 0.5 * (diff + fitted_mass_outside),
    })
}

/// Data source of a study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudySource {
    Poisson(BivPoissonSpec),
    Lindley(PoissonLindleySpec),
    /// User-supplied counts.
    Data,
}

/// Fit of one dimension pair.
#[derive(Debug, Clone)]
pub struct DimsResult {
    pub dims: (usize, usize),
    pub fit: EmFit,
    pub report: FitReport,
}

#[derive(Debug, Clone)]
pub struct StudyResult {
    pub data: CountDataset,
    pub results: Vec<DimsResult>,
}

/// Simulated data for a generator-backed study.
pub fn study_data(source: &StudySource, n: usize, seed: u64) -> Result<CountDataset> {
    match source {
        StudySource::Poisson(spec) => sample_biv_poisson(spec, n, seed),
        StudySource::Lindley(spec) => sample_poisson_lindley(spec, n, seed),
        StudySource::Data => Err(Error::InvalidData(
            "user-data studies need an input dataset".into(),
        )),
    }
}

/// Fits every dimension pair to `data` with the same EM seed.
pub fn run_study(
    data: CountDataset,
    dims: &[(usize, usize)],
    iters: usize,
    seed: u64,
) -> Result<StudyResult> {
    let results = dims
        .par_iter()
        .map(|&(e, s)| {
            let mut config = EmConfig::new(e, s, seed);
            config.max_iters = iters;
            let fit = em_fit(&data, &config)?;
            let report = fit_report(&data, &fit.params)?;
            Ok(DimsResult {
                dims: (e, s),
                fit,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult { data, results })
}
