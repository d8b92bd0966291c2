//! Compound sums `Y_k = X_{k,1} + ... + X_{k,tau_k}` driven by a CDPH pair.
//!
//! Two routes to the joint Laplace transform: the joint pgf evaluated at the
//! summand transforms (independent coordinates), and an explicit MPH*
//! representation built on the coupled chain (dependent MPH* summands).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cdph::{CdphParams, CdphSampler};
use crate::closures::{build_coupled_chain, ChainState};
use crate::dph::{categorical, validate_probability_vector};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

const RATE_TOL: f64 = 1e-10;
/// Relative disagreement between the two Richardson inputs above which the
/// extrapolation is reported as non-convergent.
const RICHARDSON_TOL: f64 = 1e-3;
/// Highest per-coordinate derivative order supported by the stencils.
pub const MAX_NUMERIC_ORDER: u32 = 2;

/// Argument of a bivariate Laplace transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplacePoint {
    pub theta1: f64,
    pub theta2: f64,
}

impl LaplacePoint {
    pub fn new(theta1: f64, theta2: f64) -> Result<Self> {
        if !(theta1 >= 0.0 && theta2 >= 0.0) || !theta1.is_finite() || !theta2.is_finite() {
            return Err(Error::OutOfRange(format!(
                "Laplace argument ({theta1}, {theta2}) must be non-negative"
            )));
        }
        Ok(Self { theta1, theta2 })
    }
}

/// Laplace transform `theta -> E[exp(-theta X)]` of a positive summand.
///
/// `lower_bound` is the infimum of the arguments where the transform may be
/// evaluated. Transforms that are only known on `[0, inf)` keep the default;
/// numerical moments need it strictly negative.
pub trait LaplaceTransform: Sync {
    fn eval(&self, theta: f64) -> f64;

    fn lower_bound(&self) -> f64 {
        0.0
    }
}

impl<F: Fn(f64) -> f64 + Sync> LaplaceTransform for F {
    fn eval(&self, theta: f64) -> f64 {
        self(theta)
    }
}

/// Exponential summand with the given rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Exponential {
    pub rate: f64,
}

impl Exponential {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::InvalidParameters(format!(
                "exponential rate {rate} must be positive"
            )));
        }
        Ok(Self { rate })
    }
}

impl LaplaceTransform for Exponential {
    fn eval(&self, theta: f64) -> f64 {
        self.rate / (self.rate + theta)
    }

    fn lower_bound(&self) -> f64 {
        -self.rate
    }
}

/// Continuous phase-type summand `(pi, S)`: `pi (theta I - S)^{-1} (-S 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseType {
    pi: Vector,
    s: Matrix,
    exit: Vector,
    lower: f64,
}

impl PhaseType {
    pub fn new(pi: Vector, s: Matrix) -> Result<Self> {
        let pi = validate_probability_vector(&pi, "initial vector")?;
        if pi.len() != s.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "initial vector of length {} for a {}x{} generator",
                pi.len(),
                s.nrows(),
                s.ncols()
            )));
        }
        let exit = validate_subintensity(&s)?;
        // theta I - S = (-S)(I + theta (-S)^{-1}) stays invertible for
        // |theta| ||(-S)^{-1}|| < 1
        let green = linalg::inverse(&(-&s))?;
        let lower = -1.0 / linalg::inf_norm(&green);
        Ok(Self { pi, s, exit, lower })
    }

    pub fn mean(&self) -> Result<f64> {
        let ones = Vector::from_element(self.s.nrows(), 1.0);
        Ok(self.pi.dot(&linalg::solve(&(-&self.s), &ones)?))
    }
}

impl LaplaceTransform for PhaseType {
    fn eval(&self, theta: f64) -> f64 {
        let n = self.s.nrows();
        let m = Matrix::identity(n, n) * theta - &self.s;
        match linalg::solve(&m, &self.exit) {
            Ok(w) => self.pi.dot(&w),
            Err(_) => f64::NAN,
        }
    }

    fn lower_bound(&self) -> f64 {
        self.lower
    }
}

/// Checks a subintensity matrix and returns its exit rates `-S 1`.
fn validate_subintensity(s: &Matrix) -> Result<Vector> {
    if s.nrows() != s.ncols() {
        return Err(Error::NonSquare {
            rows: s.nrows(),
            cols: s.ncols(),
        });
    }
    let n = s.nrows();
    for i in 0..n {
        for j in 0..n {
            let x = s[(i, j)];
            if !x.is_finite() {
                return Err(Error::InvalidParameters(format!("generator entry {x}")));
            }
            if i == j && x >= 0.0 {
                return Err(Error::InvalidParameters(format!(
                    "diagonal entry {x} of row {i} must be negative"
                )));
            }
            if i != j && x < -linalg::NEG_CLAMP {
                return Err(Error::InvalidParameters(format!(
                    "off-diagonal entry {x} at ({i}, {j}) is negative"
                )));
            }
        }
    }
    let exit = Vector::from_iterator(n, s.row_iter().map(|r| (-r.sum()).max(0.0)));
    if s.row_iter().any(|r| r.sum() > RATE_TOL) {
        return Err(Error::InvalidParameters(
            "generator row sum above zero".into(),
        ));
    }
    if !exit.iter().any(|&x| x > 0.0) {
        return Err(Error::NotTerminating("generator has no exit rate".into()));
    }
    let (_, jump) = uniformize(s);
    if !linalg::terminates(&jump) {
        return Err(Error::NotTerminating(
            "uniformized chain does not decay".into(),
        ));
    }
    Ok(exit)
}

/// `(lambda, I + S / lambda)` with `lambda` the largest exit intensity.
fn uniformize(s: &Matrix) -> (f64, Matrix) {
    let rate = s.diagonal().iter().fold(0.0f64, |m, x| m.max(-x));
    let n = s.nrows();
    (rate, Matrix::identity(n, n) + s / rate)
}

/// Bivariate MPH* law: rewards `R` (2 x |C|) accumulated along a terminating
/// jump process with initial vector `pi` and subintensity `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct MphStarParams {
    pi: Vector,
    s: Matrix,
    rewards: Matrix,
    exit: Vector,
}

impl MphStarParams {
    pub fn new(pi: Vector, s: Matrix, rewards: Matrix) -> Result<Self> {
        let pi = validate_probability_vector(&pi, "initial vector")?;
        if pi.len() != s.nrows() || rewards.shape() != (2, s.ncols()) {
            return Err(Error::DimensionMismatch(format!(
                "pi of length {}, S {}x{}, R {}x{}",
                pi.len(),
                s.nrows(),
                s.ncols(),
                rewards.nrows(),
                rewards.ncols()
            )));
        }
        let exit = validate_subintensity(&s)?;
        let rewards = linalg::clamp_nonnegative(&rewards, "reward matrix")?;
        Ok(Self {
            pi,
            s,
            rewards,
            exit,
        })
    }

    /// Independent coordinates: run `(pi1, s1)` with reward on the first
    /// coordinate, then restart in `(pi2, s2)` with reward on the second.
    pub fn independent(first: &PhaseType, second: &PhaseType) -> Result<Self> {
        let (n1, n2) = (first.s.nrows(), second.s.nrows());
        let n = n1 + n2;
        let mut pi = Vector::zeros(n);
        pi.rows_mut(0, n1).copy_from(&first.pi);
        let mut s = Matrix::zeros(n, n);
        s.view_mut((0, 0), (n1, n1)).copy_from(&first.s);
        s.view_mut((0, n1), (n1, n2))
            .copy_from(&(&first.exit * second.pi.transpose()));
        s.view_mut((n1, n1), (n2, n2)).copy_from(&second.s);
        let mut rewards = Matrix::zeros(2, n);
        rewards.view_mut((0, 0), (1, n1)).fill(1.0);
        rewards.view_mut((1, n1), (1, n2)).fill(1.0);
        Self::new(pi, s, rewards)
    }

    pub fn dim(&self) -> usize {
        self.pi.len()
    }

    pub fn pi(&self) -> &Vector {
        &self.pi
    }

    pub fn s(&self) -> &Matrix {
        &self.s
    }

    pub fn rewards(&self) -> &Matrix {
        &self.rewards
    }

    /// Exit rates `-S 1`.
    pub fn exit(&self) -> &Vector {
        &self.exit
    }

    /// `pi (Delta - S)^{-1} (-S 1)`, `Delta = diag(theta1 r1 + theta2 r2)`.
    pub fn laplace(&self, point: LaplacePoint) -> Result<f64> {
        self.laplace_raw(point.theta1, point.theta2)
    }

    /// Same formula without the sign restriction; used for differentiation.
    pub(crate) fn laplace_raw(&self, theta1: f64, theta2: f64) -> Result<f64> {
        let mut m = -&self.s;
        for j in 0..self.dim() {
            m[(j, j)] += theta1 * self.rewards[(0, j)] + theta2 * self.rewards[(1, j)];
        }
        Ok(self.pi.dot(&linalg::solve(&m, &self.exit)?))
    }

    /// `E[X_k]` from the occupation times `pi (-S)^{-1}`.
    pub fn mean(&self, k: usize) -> Result<f64> {
        check_coord(k)?;
        let occupation = linalg::solve(&(-self.s.transpose()), &self.pi)?;
        Ok(occupation.dot(&self.rewards.row(k - 1).transpose()))
    }

    /// Marginal transform of coordinate `k` as a summand transform.
    pub fn marginal(&self, k: usize) -> Result<MphStarMarginal<'_>> {
        check_coord(k)?;
        let green = linalg::inverse(&(-&self.s))?;
        let rmax = self.rewards.row(k - 1).max();
        let lower = if rmax > 0.0 {
            -1.0 / (rmax * linalg::inf_norm(&green))
        } else {
            f64::NEG_INFINITY
        };
        Ok(MphStarMarginal {
            params: self,
            coord: k,
            lower,
        })
    }

    pub fn sampler(&self) -> Result<MphStarSampler> {
        MphStarSampler::new(self)
    }
}

fn check_coord(k: usize) -> Result<()> {
    if k == 1 || k == 2 {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!(
            "coordinate {k}, expected 1 or 2"
        )))
    }
}

/// Transform of one coordinate of an MPH* pair.
#[derive(Debug, Clone, Copy)]
pub struct MphStarMarginal<'a> {
    params: &'a MphStarParams,
    coord: usize,
    lower: f64,
}

impl LaplaceTransform for MphStarMarginal<'_> {
    fn eval(&self, theta: f64) -> f64 {
        let (t1, t2) = if self.coord == 1 {
            (theta, 0.0)
        } else {
            (0.0, theta)
        };
        self.params.laplace_raw(t1, t2).unwrap_or(f64::NAN)
    }

    fn lower_bound(&self) -> f64 {
        self.lower
    }
}

/// `E[exp(-theta1 Y1 - theta2 Y2)]` for independent coordinates: the joint
/// pgf at the summand transforms.
pub fn compound_laplace(
    params: &CdphParams,
    lt1: &dyn LaplaceTransform,
    lt2: &dyn LaplaceTransform,
    point: LaplacePoint,
) -> Result<f64> {
    let a1 = lt1.eval(point.theta1);
    let a2 = lt2.eval(point.theta2);
    for (k, a) in [(1, a1), (2, a2)] {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::OutOfRange(format!(
                "summand transform {k} returned {a}, expected a value in (0, 1]"
            )));
        }
    }
    params.joint_pgf(a1, a2)
}

/// Transform evaluation on the extended domain used by finite differences.
fn compound_laplace_raw(
    params: &CdphParams,
    lt1: &dyn LaplaceTransform,
    lt2: &dyn LaplaceTransform,
    theta1: f64,
    theta2: f64,
) -> Result<f64> {
    let a1 = lt1.eval(theta1);
    let a2 = lt2.eval(theta2);
    if !(a1.is_finite() && a2.is_finite()) {
        return Err(Error::Numeric(format!(
            "summand transform undefined at ({theta1}, {theta2})"
        )));
    }
    params.pgf_latent_raw(a1 * a2, a1, a2)
}

/// MPH* representation of `(Y1, Y2)` when each summand pair is MPH*.
///
/// Each step of the coupled chain consumes one run of the summand process;
/// coordinate `k` collects rewards only while its own chain is alive. Mass
/// leaving `S×S` through `q1 ⊗ q2` ends both coordinates at once and goes
/// straight to absorption.
pub fn build_compound_mphstar(cdph: &CdphParams, summand: &MphStarParams) -> Result<MphStarParams> {
    let chain = build_coupled_chain(cdph);
    let d = chain.dim();
    let c = summand.dim();
    let restart = &summand.exit * summand.pi.transpose();
    let s = linalg::kron(&Matrix::identity(d, d), &summand.s) + linalg::kron(&chain.pmax, &restart);
    let column = |v: &Vector| Matrix::from_column_slice(v.len(), 1, v.as_slice());
    let init = linalg::kron(&column(&chain.init), &column(&summand.pi));
    let init = Vector::from_column_slice(init.as_slice());

    let mut rewards = Matrix::zeros(2, d * c);
    for (b, state) in chain.states.iter().enumerate() {
        let (first, second) = match state {
            ChainState::Common(_) | ChainState::Both(..) => (true, true),
            ChainState::FirstDone(_) => (false, true),
            ChainState::SecondDone(_) => (true, false),
        };
        for (k, active) in [first, second].into_iter().enumerate() {
            if active {
                rewards
                    .view_mut((k, b * c), (1, c))
                    .copy_from(&summand.rewards.row(k));
            }
        }
    }
    MphStarParams::new(init, s, rewards)
}

/// Finite-difference estimate with its Richardson error estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NumericMoment {
    pub value: f64,
    pub error: f64,
}

/// Base step for the given total derivative order. Higher orders divide
/// round-off by `h^order`, so the step grows with the order.
fn base_step(order: u32) -> f64 {
    match order {
        0 | 1 => 1e-4,
        2 => 1e-3,
        3 => 3e-3,
        _ => 1e-2,
    }
}

/// Central-difference weights for the `r`-th derivative at offsets -1, 0, 1.
fn stencil(r: u32, h: f64) -> [f64; 3] {
    match r {
        0 => [0.0, 1.0, 0.0],
        1 => [-0.5 / h, 0.0, 0.5 / h],
        _ => [1.0 / (h * h), -2.0 / (h * h), 1.0 / (h * h)],
    }
}

/// `E[Y1^r1 Y2^r2]` from a joint Laplace transform by central differences at
/// the origin with one Richardson level.
pub fn moment_from_laplace(
    transform: impl Fn(f64, f64) -> Result<f64>,
    r1: u32,
    r2: u32,
) -> Result<NumericMoment> {
    if r1 > MAX_NUMERIC_ORDER || r2 > MAX_NUMERIC_ORDER {
        return Err(Error::OutOfRange(format!(
            "numeric moments support orders up to {MAX_NUMERIC_ORDER} per coordinate"
        )));
    }
    if r1 == 0 && r2 == 0 {
        return Ok(NumericMoment {
            value: transform(0.0, 0.0)?,
            error: 0.0,
        });
    }
    let difference = |h: f64| -> Result<f64> {
        let (w1, w2) = (stencil(r1, h), stencil(r2, h));
        let mut total = 0.0;
        for (i, a) in w1.iter().enumerate() {
            for (j, b) in w2.iter().enumerate() {
                if *a != 0.0 && *b != 0.0 {
                    let t1 = (i as f64 - 1.0) * h;
                    let t2 = (j as f64 - 1.0) * h;
                    total += a * b * transform(t1, t2)?;
                }
            }
        }
        Ok(total)
    };
    let h = base_step(r1 + r2);
    let coarse = difference(h)?;
    let fine = difference(h / 2.0)?;
    let sign = if (r1 + r2).is_multiple_of(2) {
        1.0
    } else {
        -1.0
    };
    let value = sign * (4.0 * fine - coarse) / 3.0;
    let error = (value - sign * fine).abs();
    if !value.is_finite() || error > RICHARDSON_TOL * value.abs().max(1e-12) {
        return Err(Error::Numeric(format!(
            "finite differences did not settle: value {value}, error {error}"
        )));
    }
    Ok(NumericMoment { value, error })
}

/// Largest step the stencils use; transforms must extend below `-h`.
fn check_extends(lower: f64, r: u32, total: u32) -> Result<()> {
    if r > 0 && lower >= -base_step(total) {
        return Err(Error::OutOfRange(
            "summand transform is not defined on a neighbourhood of zero".into(),
        ));
    }
    Ok(())
}

/// `E[Y1^r1 Y2^r2]` for independent summand coordinates.
pub fn compound_cross_moment_numeric(
    params: &CdphParams,
    lt1: &dyn LaplaceTransform,
    lt2: &dyn LaplaceTransform,
    r1: u32,
    r2: u32,
) -> Result<NumericMoment> {
    check_extends(lt1.lower_bound(), r1, r1 + r2)?;
    check_extends(lt2.lower_bound(), r2, r1 + r2)?;
    moment_from_laplace(
        |t1, t2| compound_laplace_raw(params, lt1, lt2, t1, t2),
        r1,
        r2,
    )
}

/// `E[X1^r1 X2^r2]` of an MPH* pair, e.g. one built by
/// [`build_compound_mphstar`].
pub fn mphstar_cross_moment_numeric(
    params: &MphStarParams,
    r1: u32,
    r2: u32,
) -> Result<NumericMoment> {
    moment_from_laplace(|t1, t2| params.laplace_raw(t1, t2), r1, r2)
}

/// Source of i.i.d. summand pairs `(X1, X2)`.
pub trait PairSampler: Sync {
    fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64);
}

/// Independent coordinates with their own scalar laws.
#[derive(Debug, Clone, Copy)]
pub struct IndependentPair<A, B>(pub A, pub B);

impl<A, B> PairSampler for IndependentPair<A, B>
where
    A: Distribution<f64> + Sync,
    B: Distribution<f64> + Sync,
{
    fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        (self.0.sample(rng), self.1.sample(rng))
    }
}

/// `X1 = X2 = 1`, so `(Y1, Y2) = (tau1, tau2)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitPair;

impl PairSampler for UnitPair {
    fn sample_pair<R: Rng + ?Sized>(&self, _rng: &mut R) -> (f64, f64) {
        (1.0, 1.0)
    }
}

/// Exact MPH* sampler by uniformization: the jump process is the
/// uniformized chain observed at the jumps of a rate-`lambda` Poisson clock.
#[derive(Debug, Clone)]
pub struct MphStarSampler {
    start: WeightedIndex<f64>,
    /// Over `C` then absorption.
    rows: Vec<WeightedIndex<f64>>,
    holding: Exp<f64>,
    rewards: Matrix,
}

impl MphStarSampler {
    pub fn new(params: &MphStarParams) -> Result<Self> {
        let (rate, jump) = uniformize(&params.s);
        let n = params.dim();
        let start = categorical(params.pi.iter().copied())?;
        let rows = (0..n)
            .map(|i| {
                let exit = (params.exit[i] / rate).max(0.0);
                categorical(
                    jump.row(i)
                        .iter()
                        .map(|x| x.max(0.0))
                        .chain(std::iter::once(exit)),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let holding = Exp::new(rate).map_err(|e| Error::InvalidParameters(e.to_string()))?;
        Ok(Self {
            start,
            rows,
            holding,
            rewards: params.rewards.clone(),
        })
    }
}

impl PairSampler for MphStarSampler {
    fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let n = self.rows.len();
        let mut state = self.start.sample(rng);
        let (mut x1, mut x2) = (0.0, 0.0);
        loop {
            let t = self.holding.sample(rng);
            x1 += self.rewards[(0, state)] * t;
            x2 += self.rewards[(1, state)] * t;
            let next = self.rows[state].sample(rng);
            if next == n {
                return (x1, x2);
            }
            state = next;
        }
    }
}

/// One draw of `(Y1, Y2)`: summand pair `l` feeds both coordinates while
/// `l <= min(tau1, tau2)`, then only the longer one.
pub fn compound_sample<S: PairSampler + ?Sized, R: Rng + ?Sized>(
    counts: &CdphSampler,
    summands: &S,
    rng: &mut R,
) -> (f64, f64) {
    let draw = counts.sample(rng);
    let (mut y1, mut y2) = (0.0, 0.0);
    for l in 1..=draw.tau1.max(draw.tau2) {
        let (x1, x2) = summands.sample_pair(rng);
        if l <= draw.tau1 {
            y1 += x1;
        }
        if l <= draw.tau2 {
            y2 += x2;
        }
    }
    (y1, y2)
}

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl MonteCarloEstimate {
    /// Distance to `target` in standard errors.
    pub fn z_score(&self, target: f64) -> f64 {
        (self.mean - target).abs() / self.std_error.max(f64::MIN_POSITIVE)
    }
}

/// Number of independent generator streams used by [`monte_carlo`].
pub const MC_STREAMS: u64 = 64;

/// Averages each statistic over `draws` compound pairs. Work is split over
/// [`MC_STREAMS`] ChaCha streams derived from `seed`, so the result depends
/// only on `seed` and `draws`, not on the thread count.
pub fn monte_carlo<S: PairSampler>(
    cdph: &CdphParams,
    summands: &S,
    statistics: &[&(dyn Fn(f64, f64) -> f64 + Sync)],
    draws: u64,
    seed: u64,
) -> Result<Vec<MonteCarloEstimate>> {
    if draws < 2 {
        return Err(Error::OutOfRange("need at least two draws".into()));
    }
    let counts = cdph.sampler()?;
    let k = statistics.len();
    let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..MC_STREAMS)
        .into_par_iter()
        .map(|stream| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let n = draws / MC_STREAMS + u64::from(stream < draws % MC_STREAMS);
            let mut sum = vec![0.0; k];
            let mut sq = vec![0.0; k];
            for _ in 0..n {
                let (y1, y2) = compound_sample(&counts, summands, &mut rng);
                for (i, f) in statistics.iter().enumerate() {
                    let v = f(y1, y2);
                    sum[i] += v;
                    sq[i] += v * v;
                }
            }
            (sum, sq)
        })
        .collect();
    let n = draws as f64;
    Ok((0..k)
        .map(|i| {
            let s: f64 = partial.iter().map(|p| p.0[i]).sum();
            let q: f64 = partial.iter().map(|p| p.1[i]).sum();
            let mean = s / n;
            let var = ((q - n * mean * mean) / (n - 1.0)).max(0.0);
            MonteCarloEstimate {
                mean,
                std_error: (var / n).sqrt(),
            }
        })
        .collect())
}
