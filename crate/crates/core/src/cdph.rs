//! Common-shock bivariate discrete phase-type distributions.
//!
//! Two chains share a trajectory through the common-shock states `E`
//! (matrix `P`), jump together into `S` through `U`, and then run
//! independently with `Q1` and `Q2` until each is absorbed. The pair of
//! absorption steps `(tau1, tau2)` lives on `{2, 3, ...}^2`; the shared
//! portion `tau12` is the common shock.
//!
//! The observable scale is `N_k = c_k (tau_k - 2) + k_k`, carried by [`Shift`].

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dph::{self, categorical, factorial, DphParams};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix, Vector};

fn check_pgf_args(zs: &[f64]) -> Result<()> {
    match zs.iter().find(|z| !(0.0..=1.0).contains(*z)) {
        Some(z) => Err(Error::OutOfRange(format!(
            "pgf argument {z} outside [0, 1]"
        ))),
        None => Ok(()),
    }
}

/// Highest total order accepted by [`CdphParams::cross_moment`].
pub const MAX_CROSS_ORDER: u32 = 6;

/// Affine map from `tau_k` to the observed lattice: `N_k = c_k (tau_k - 2) + k_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shift {
    pub c1: f64,
    pub k1: f64,
    pub c2: f64,
    pub k2: f64,
}

impl Default for Shift {
    /// The identity map: observed values are the absorption steps themselves.
    fn default() -> Self {
        Self {
            c1: 1.0,
            k1: 2.0,
            c2: 1.0,
            k2: 2.0,
        }
    }
}

const LATTICE_TOL: f64 = 1e-9;

impl Shift {
    pub fn new(c1: f64, k1: f64, c2: f64, k2: f64) -> Result<Self> {
        let shift = Self { c1, k1, c2, k2 };
        shift.validate()?;
        Ok(shift)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) || !self.c1.is_finite() || !self.c2.is_finite() {
            return Err(Error::InvalidParameters(format!(
                "shift scales must be positive, got ({}, {})",
                self.c1, self.c2
            )));
        }
        if !self.k1.is_finite() || !self.k2.is_finite() {
            return Err(Error::InvalidParameters(
                "shift offsets must be finite".into(),
            ));
        }
        Ok(())
    }

    fn parts(&self, coord: usize) -> (f64, f64) {
        match coord {
            1 => (self.c1, self.k1),
            _ => (self.c2, self.k2),
        }
    }

    /// Back-transforms an observed value of coordinate `coord` (1 or 2) to `tau`.
    pub fn to_tau(&self, x: f64, coord: usize) -> Result<u64> {
        let (c, k) = self.parts(coord);
        let off = (x - k) / c;
        let rounded = off.round();
        if !off.is_finite() || (off - rounded).abs() > LATTICE_TOL || rounded < -LATTICE_TOL {
            return Err(Error::OffLattice { value: x, c, k });
        }
        Ok(rounded as u64 + 2)
    }

    pub fn to_observed(&self, tau: u64, coord: usize) -> f64 {
        let (c, k) = self.parts(coord);
        c * (tau as f64 - 2.0) + k
    }
}

/// `(tau12, tau1 - tau12, tau2 - tau12)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentTriple {
    pub m: u64,
    pub z1: u64,
    pub z2: u64,
}

impl LatentTriple {
    pub fn tau1(&self) -> u64 {
        self.m + self.z1
    }

    pub fn tau2(&self) -> u64 {
        self.m + self.z2
    }
}

/// Parameters `(alpha, P, U, Q1, Q2)` plus the observation shift.
#[derive(Debug, Clone, PartialEq)]
pub struct CdphParams {
    alpha: Vector,
    p: Matrix,
    u: Matrix,
    q1: Matrix,
    q2: Matrix,
    q1_exit: Vector,
    q2_exit: Vector,
    shift: Shift,
}

impl CdphParams {
    pub fn new(alpha: Vector, p: Matrix, u: Matrix, q1: Matrix, q2: Matrix) -> Result<Self> {
        let e = alpha.len();
        if p.shape() != (e, e) {
            return Err(Error::DimensionMismatch(format!(
                "P is {}x{} but alpha has length {e}",
                p.nrows(),
                p.ncols()
            )));
        }
        let s = u.ncols();
        if u.nrows() != e || s == 0 {
            return Err(Error::DimensionMismatch(format!(
                "U is {}x{}, expected {e} rows and at least one column",
                u.nrows(),
                u.ncols()
            )));
        }
        for (name, q) in [("Q1", &q1), ("Q2", &q2)] {
            if q.shape() != (s, s) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {}x{}, expected {s}x{s}",
                    q.nrows(),
                    q.ncols()
                )));
            }
        }
        let alpha = dph::validate_probability_vector(&alpha, "alpha")?;
        let p = linalg::clamp_nonnegative(&p, "P")?;
        let u = linalg::clamp_nonnegative(&u, "U")?;
        let q1 = linalg::clamp_nonnegative(&q1, "Q1")?;
        let q2 = linalg::clamp_nonnegative(&q2, "Q2")?;

        for i in 0..e {
            let total = p.row(i).sum() + u.row(i).sum();
            if (total - 1.0).abs() > linalg::ROW_SUM_TOL {
                return Err(Error::InvalidParameters(format!(
                    "row {i} of (P U) sums to {total}, expected 1"
                )));
            }
        }
        if !linalg::terminates(&p) {
            return Err(Error::InvalidParameters(
                "common-shock matrix P does not terminate".into(),
            ));
        }
        for (name, q) in [("Q1", &q1), ("Q2", &q2)] {
            let report = linalg::validate_substochastic(q, false);
            if !report.is_valid() {
                return Err(Error::InvalidParameters(format!(
                    "{name}: {}",
                    report.describe()
                )));
            }
        }
        let q1_exit = linalg::exit_vector(&q1).map(|x| x.max(0.0));
        let q2_exit = linalg::exit_vector(&q2).map(|x| x.max(0.0));
        Ok(Self {
            alpha,
            p,
            u,
            q1,
            q2,
            q1_exit,
            q2_exit,
            shift: Shift::default(),
        })
    }

    pub fn with_shift(mut self, shift: Shift) -> Result<Self> {
        shift.validate()?;
        self.shift = shift;
        Ok(self)
    }

    /// Random parameters: independent uniforms, with `alpha`, each row of
    /// `(P U)` and each row of `(Q_k, exit)` normalized to sum to one.
    pub fn random<R: Rng + ?Sized>(e_dim: usize, s_dim: usize, rng: &mut R) -> Result<Self> {
        if e_dim == 0 || s_dim == 0 {
            return Err(Error::OutOfRange(
                "dimensions must be at least (1, 1)".into(),
            ));
        }
        let mut uniform = || rng.random::<f64>().max(f64::MIN_POSITIVE);
        let alpha = Vector::from_iterator(e_dim, (0..e_dim).map(|_| uniform()));
        let alpha = &alpha / alpha.sum();

        let mut p = Matrix::zeros(e_dim, e_dim);
        let mut u = Matrix::zeros(e_dim, s_dim);
        for i in 0..e_dim {
            let row: Vec<f64> = (0..e_dim + s_dim).map(|_| uniform()).collect();
            let total: f64 = row.iter().sum();
            for j in 0..e_dim {
                p[(i, j)] = row[j] / total;
            }
            for j in 0..s_dim {
                u[(i, j)] = row[e_dim + j] / total;
            }
        }
        let mut q = || {
            let mut q = Matrix::zeros(s_dim, s_dim);
            for i in 0..s_dim {
                let row: Vec<f64> = (0..=s_dim).map(|_| uniform()).collect();
                let total: f64 = row.iter().sum();
                for j in 0..s_dim {
                    q[(i, j)] = row[j] / total;
                }
            }
            q
        };
        let q1 = q();
        let q2 = q();
        Self::new(alpha, p, u, q1, q2)
    }

    pub fn alpha(&self) -> &Vector {
        &self.alpha
    }
    pub fn p(&self) -> &Matrix {
        &self.p
    }
    pub fn u(&self) -> &Matrix {
        &self.u
    }
    pub fn q1(&self) -> &Matrix {
        &self.q1
    }
    pub fn q2(&self) -> &Matrix {
        &self.q2
    }
    pub fn q1_exit(&self) -> &Vector {
        &self.q1_exit
    }
    pub fn q2_exit(&self) -> &Vector {
        &self.q2_exit
    }
    pub fn shift(&self) -> Shift {
        self.shift
    }

    /// `Q_k` for `k` in {1, 2}.
    pub fn q(&self, k: usize) -> &Matrix {
        if k == 1 {
            &self.q1
        } else {
            &self.q2
        }
    }

    pub fn q_exit(&self, k: usize) -> &Vector {
        if k == 1 {
            &self.q1_exit
        } else {
            &self.q2_exit
        }
    }

    /// `(|E|, |S|)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.alpha.len(), self.u.ncols())
    }

    /// Distribution of the common shock `tau12`, i.e. `DPH(alpha, P)`.
    pub fn common_shock(&self) -> Result<DphParams> {
        DphParams::new(self.alpha.clone(), self.p.clone())
    }

    /// Marginal of `tau_k`: `DPH((alpha, 0), [[P, U], [0, Q_k]])`.
    pub fn marginal(&self, k: usize) -> Result<DphParams> {
        let (e, s) = self.dims();
        let mut block = Matrix::zeros(e + s, e + s);
        block.view_mut((0, 0), (e, e)).copy_from(&self.p);
        block.view_mut((0, e), (e, s)).copy_from(&self.u);
        block.view_mut((e, e), (s, s)).copy_from(self.q(k));
        let mut init = Vector::zeros(e + s);
        init.rows_mut(0, e).copy_from(&self.alpha);
        DphParams::new(init, block)
    }

    fn check_state(&self, i: usize) -> Result<()> {
        if i >= self.alpha.len() {
            return Err(Error::OutOfRange(format!(
                "state index {i} outside E of size {}",
                self.alpha.len()
            )));
        }
        Ok(())
    }

    fn unit(&self, i: usize) -> Vector {
        let mut e = Vector::zeros(self.alpha.len());
        e[i] = 1.0;
        e
    }

    fn psi_from(&self, start: &Vector, m: u64, z1: u64, z2: u64) -> Result<f64> {
        if m < 1 || z1 < 1 || z2 < 1 {
            return Err(Error::OutOfRange(format!(
                "psi arguments must be >= 1, got ({m}, {z1}, {z2})"
            )));
        }
        let pow = |x: u64| {
            u32::try_from(x - 1).map_err(|_| Error::OutOfRange(format!("argument {x} too large")))
        };
        let entry =
            (start.transpose() * linalg::mat_power(&self.p, pow(m)?)? * &self.u).transpose();
        let g1 = linalg::mat_power(&self.q1, pow(z1)?)? * &self.q1_exit;
        let g2 = linalg::mat_power(&self.q2, pow(z2)?)? * &self.q2_exit;
        let h = linalg::hadamard(&g1, &g2)?;
        Ok(entry.dot(&h).max(0.0))
    }

    /// `P(tau12 = m, tau1 - tau12 = z1, tau2 - tau12 = z2)`.
    pub fn psi(&self, m: u64, z1: u64, z2: u64) -> Result<f64> {
        self.psi_from(&self.alpha, m, z1, z2)
    }

    /// As [`CdphParams::psi`], started from common-shock state `i`.
    pub fn psi_conditional(&self, i: usize, m: u64, z1: u64, z2: u64) -> Result<f64> {
        self.check_state(i)?;
        self.psi_from(&self.unit(i), m, z1, z2)
    }

    /// Sum over the diagonal `m = 1..min(n1, n2) - 1` using forward vectors.
    fn pmf_from(&self, start: &Vector, n1: u64, n2: u64) -> f64 {
        if n1 < 2 || n2 < 2 {
            return 0.0;
        }
        let shared = n1.min(n2) - 1;
        let g1 = exit_profile(&self.q1, &self.q1_exit, (n1 - 1) as usize);
        let g2 = exit_profile(&self.q2, &self.q2_exit, (n2 - 1) as usize);
        let pt = self.p.transpose();
        let ut = self.u.transpose();
        let mut row = start.clone();
        let mut total = 0.0;
        for m in 1..=shared {
            let entry = &ut * &row;
            let a = &g1[(n1 - m - 1) as usize];
            let b = &g2[(n2 - m - 1) as usize];
            total += entry
                .iter()
                .zip(a.iter().zip(b.iter()))
                .map(|(e, (x, y))| e * x * y)
                .sum::<f64>();
            row = &pt * row;
        }
        total.max(0.0)
    }

    /// Joint pmf of `(tau1, tau2)`; zero outside `{2, 3, ...}^2`.
    pub fn joint_pmf(&self, n1: u64, n2: u64) -> f64 {
        self.pmf_from(&self.alpha, n1, n2)
    }

    pub fn joint_pmf_conditional(&self, i: usize, n1: u64, n2: u64) -> Result<f64> {
        self.check_state(i)?;
        Ok(self.pmf_from(&self.unit(i), n1, n2))
    }

    /// Pmf of the observed pair `(N1, N2)` on the shifted lattice.
    pub fn shifted_pmf(&self, x1: f64, x2: f64) -> Result<f64> {
        let n1 = self.shift.to_tau(x1, 1)?;
        let n2 = self.shift.to_tau(x2, 2)?;
        Ok(self.joint_pmf(n1, n2))
    }

    /// Latent pgf without domain checks; valid wherever the three
    /// resolvents exist.
    pub(crate) fn pgf_latent_raw(&self, z0: f64, z1: f64, z2: f64) -> Result<f64> {
        // zeta (I/zeta - T)^{-1} = zeta (I - zeta T)^{-1} keeps zeta = 0 finite
        let row = linalg::resolvent_apply(&self.p.transpose(), z0, &self.alpha)? * z0;
        let entry = self.u.transpose() * row;
        let g1 = linalg::resolvent_apply(&self.q1, z1, &self.q1_exit)? * z1;
        let g2 = linalg::resolvent_apply(&self.q2, z2, &self.q2_exit)? * z2;
        Ok(entry
            .iter()
            .zip(g1.iter().zip(g2.iter()))
            .map(|(e, (a, b))| e * a * b)
            .sum())
    }

    /// `E[z0^tau12 z1^(tau1 - tau12) z2^(tau2 - tau12)]` for arguments in `[0, 1]`.
    pub fn joint_pgf_latent(&self, z0: f64, z1: f64, z2: f64) -> Result<f64> {
        check_pgf_args(&[z0, z1, z2])?;
        self.pgf_latent_raw(z0, z1, z2)
    }

    /// `E[z1^tau1 z2^tau2]`, the latent pgf at `(z1 z2, z1, z2)`.
    pub fn joint_pgf(&self, z1: f64, z2: f64) -> Result<f64> {
        check_pgf_args(&[z1, z2])?;
        self.pgf_latent_raw(z1 * z2, z1, z2)
    }

    /// `E[tau12^[n0] (tau1 - tau12)^[n1] (tau2 - tau12)^[n2]]` (falling factorials).
    pub fn factorial_moment_latent(&self, n0: u32, n1: u32, n2: u32) -> Result<f64> {
        let pt = factorial_kernel(&self.p.transpose(), n0)?;
        let entry = self.u.transpose() * (pt * &self.alpha);
        let g1 = factorial_kernel(&self.q1, n1)? * &self.q1_exit;
        let g2 = factorial_kernel(&self.q2, n2)? * &self.q2_exit;
        Ok(entry
            .iter()
            .zip(g1.iter().zip(g2.iter()))
            .map(|(e, (a, b))| e * a * b)
            .sum())
    }

    /// `E[tau1^r1 tau2^r2]` from the latent factorial moments.
    pub fn cross_moment(&self, r1: u32, r2: u32) -> Result<f64> {
        if r1 + r2 > MAX_CROSS_ORDER {
            return Err(Error::OutOfRange(format!(
                "cross moment order {} exceeds {MAX_CROSS_ORDER}",
                r1 + r2
            )));
        }
        let order = (r1 + r2) as usize;
        let stirling = stirling2(order);
        // factorial moments are reused heavily across the expansion
        let mut cache = std::collections::HashMap::new();
        let mut fm = |i: usize, j: usize, k: usize| -> Result<f64> {
            if let Some(v) = cache.get(&(i, j, k)) {
                return Ok(*v);
            }
            let v = self.factorial_moment_latent(i as u32, j as u32, k as u32)?;
            cache.insert((i, j, k), v);
            Ok(v)
        };
        let mut total = 0.0;
        for a in 0..=r1 as usize {
            for b in 0..=r2 as usize {
                let coeff = binomial(r1 as usize, a) * binomial(r2 as usize, b);
                let (pm, p1, p2) = (a + b, r1 as usize - a, r2 as usize - b);
                // E[M^pm Z1^p1 Z2^p2] through Stirling numbers of the second kind
                let mut raw = 0.0;
                for i in 0..=pm {
                    for j in 0..=p1 {
                        for k in 0..=p2 {
                            let s = stirling[pm][i] * stirling[p1][j] * stirling[p2][k];
                            if s != 0 {
                                raw += s as f64 * fm(i, j, k)?;
                            }
                        }
                    }
                }
                total += coeff * raw;
            }
        }
        Ok(total)
    }

    /// Smallest `(L1, L2)` with `P(tau_k > L_k) < tol` for both marginals.
    pub fn truncation(&self, tol: f64) -> Result<(u64, u64)> {
        let l1 = self.marginal(1)?.truncation_level(tol)?.max(2);
        let l2 = self.marginal(2)?.truncation_level(tol)?.max(2);
        Ok((l1, l2))
    }

    /// Pmf table on `[2, max1] x [2, max2]`.
    pub fn pmf_table(&self, max1: u64, max2: u64) -> PmfTable {
        PmfTable::new(self, max1.max(2), max2.max(2))
    }

    pub fn sampler(&self) -> Result<CdphSampler> {
        CdphSampler::new(self)
    }
}

/// `[Q^0 q, Q^1 q, ..., Q^(len-1) q]`.
pub(crate) fn exit_profile(q: &Matrix, exit: &Vector, len: usize) -> Vec<Vector> {
    let mut out = Vec::with_capacity(len);
    let mut v = exit.clone();
    for _ in 0..len {
        let next = q * &v;
        out.push(v);
        v = next;
    }
    out
}

/// `n! T^(n-1) (I - T)^(-n-1)` for `n >= 1` and `(I - T)^(-1)` for `n = 0`.
fn factorial_kernel(t: &Matrix, n: u32) -> Result<Matrix> {
    let d = t.nrows();
    let inv = linalg::inverse(&(Matrix::identity(d, d) - t))?;
    if n == 0 {
        return Ok(inv);
    }
    let mut out = linalg::mat_power(t, n - 1)?;
    for _ in 0..=n {
        out = &out * &inv;
    }
    Ok(out * factorial(n))
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Stirling numbers of the second kind `S(n, k)` for `n, k <= max`.
pub(crate) fn stirling2(max: usize) -> Vec<Vec<u64>> {
    let mut s = vec![vec![0u64; max + 1]; max + 1];
    s[0][0] = 1;
    for n in 1..=max {
        for k in 1..=n {
            s[n][k] = k as u64 * s[n - 1][k] + s[n - 1][k - 1];
        }
    }
    s
}

/// Cached joint pmf over a rectangle `[2, max1] x [2, max2]`.
///
/// Keeps `alpha P^(m-1) U`, `Q1^(z-1) q1` and `Q2^(z-1) q2` so each cell costs
/// `O(min(n1, n2) |S|)`.
#[derive(Debug, Clone)]
pub struct PmfTable {
    max1: u64,
    max2: u64,
    /// `values[(n1 - 2) * width + (n2 - 2)]`.
    values: Vec<f64>,
}

impl PmfTable {
    fn new(params: &CdphParams, max1: u64, max2: u64) -> Self {
        let shared = (max1.min(max2) - 1) as usize;
        let pt = params.p.transpose();
        let ut = params.u.transpose();
        let mut entries = Vec::with_capacity(shared);
        let mut row = params.alpha.clone();
        for _ in 0..shared {
            entries.push(&ut * &row);
            row = &pt * row;
        }
        let g1 = exit_profile(&params.q1, &params.q1_exit, (max1 - 1) as usize);
        let g2 = exit_profile(&params.q2, &params.q2_exit, (max2 - 1) as usize);
        let width = (max2 - 1) as usize;
        let mut values = vec![0.0; (max1 - 1) as usize * width];
        for n1 in 2..=max1 {
            for n2 in 2..=max2 {
                let mut total = 0.0;
                for m in 1..n1.min(n2) {
                    let e = &entries[(m - 1) as usize];
                    let a = &g1[(n1 - m - 1) as usize];
                    let b = &g2[(n2 - m - 1) as usize];
                    for j in 0..e.len() {
                        total += e[j] * a[j] * b[j];
                    }
                }
                values[(n1 - 2) as usize * width + (n2 - 2) as usize] = total.max(0.0);
            }
        }
        Self { max1, max2, values }
    }

    pub fn max1(&self) -> u64 {
        self.max1
    }

    pub fn max2(&self) -> u64 {
        self.max2
    }

    /// Cached value; zero outside the support, `None` past the table edge.
    pub fn get(&self, n1: u64, n2: u64) -> Option<f64> {
        if n1 > self.max1 || n2 > self.max2 {
            return None;
        }
        if n1 < 2 || n2 < 2 {
            return Some(0.0);
        }
        let width = (self.max2 - 1) as usize;
        Some(self.values[(n1 - 2) as usize * width + (n2 - 2) as usize])
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Iterates `(n1, n2, pmf)` in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        let width = (self.max2 - 1) as usize;
        self.values
            .iter()
            .enumerate()
            .map(move |(idx, &v)| ((idx / width) as u64 + 2, (idx % width) as u64 + 2, v))
    }
}

/// One joint draw with its latent decomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CdphDraw {
    pub tau1: u64,
    pub tau2: u64,
    pub latent: LatentTriple,
}

/// Full trajectory of a joint draw; the first entry of `s1` and `s2` is the
/// shared state entered on leaving `E`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CdphPath {
    pub e_states: Vec<usize>,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
}

impl CdphPath {
    pub fn latent(&self) -> LatentTriple {
        LatentTriple {
            m: self.e_states.len() as u64,
            z1: self.s1.len() as u64,
            z2: self.s2.len() as u64,
        }
    }
}

/// Exact sampler: shared walk in `E`, one jump into `S`, then two
/// independent walks to absorption.
#[derive(Debug, Clone)]
pub struct CdphSampler {
    start: WeightedIndex<f64>,
    /// Over `E` then `S`.
    e_rows: Vec<WeightedIndex<f64>>,
    /// Over `S` then absorption.
    q_rows: [Vec<WeightedIndex<f64>>; 2],
    e_dim: usize,
    s_dim: usize,
}

impl CdphSampler {
    pub fn new(params: &CdphParams) -> Result<Self> {
        let (e_dim, s_dim) = params.dims();
        let start = categorical(params.alpha.iter().copied())?;
        let e_rows = (0..e_dim)
            .map(|i| {
                categorical(
                    params
                        .p
                        .row(i)
                        .iter()
                        .chain(params.u.row(i).iter())
                        .copied(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let q_rows = |q: &Matrix, exit: &Vector| {
            (0..s_dim)
                .map(|i| categorical(q.row(i).iter().copied().chain(std::iter::once(exit[i]))))
                .collect::<Result<Vec<_>>>()
        };
        Ok(Self {
            start,
            e_rows,
            q_rows: [
                q_rows(&params.q1, &params.q1_exit)?,
                q_rows(&params.q2, &params.q2_exit)?,
            ],
            e_dim,
            s_dim,
        })
    }

    /// Shared phase: returns `(tau12, entry state in S)`.
    fn shared<R: Rng + ?Sized>(&self, rng: &mut R, mut visit: impl FnMut(usize)) -> (u64, usize) {
        let mut state = self.start.sample(rng);
        let mut m = 1;
        loop {
            visit(state);
            let next = self.e_rows[state].sample(rng);
            if next >= self.e_dim {
                return (m, next - self.e_dim);
            }
            state = next;
            m += 1;
        }
    }

    fn tail<R: Rng + ?Sized>(
        &self,
        k: usize,
        entry: usize,
        rng: &mut R,
        mut visit: impl FnMut(usize),
    ) -> u64 {
        let rows = &self.q_rows[k - 1];
        let mut state = entry;
        let mut z = 1;
        loop {
            visit(state);
            let next = rows[state].sample(rng);
            if next == self.s_dim {
                return z;
            }
            state = next;
            z += 1;
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CdphDraw {
        let (m, entry) = self.shared(rng, |_| {});
        let z1 = self.tail(1, entry, rng, |_| {});
        let z2 = self.tail(2, entry, rng, |_| {});
        let latent = LatentTriple { m, z1, z2 };
        CdphDraw {
            tau1: latent.tau1(),
            tau2: latent.tau2(),
            latent,
        }
    }

    pub fn sample_path<R: Rng + ?Sized>(&self, rng: &mut R) -> CdphPath {
        let mut e_states = Vec::new();
        let (_, entry) = self.shared(rng, |s| e_states.push(s));
        let mut s1 = Vec::new();
        self.tail(1, entry, rng, |s| s1.push(s));
        let mut s2 = Vec::new();
        self.tail(2, entry, rng, |s| s2.push(s));
        CdphPath { e_states, s1, s2 }
    }
}
